#include "doctest.h"
#include "test_support.hpp"

#include "mst/common.hpp"

#include <fstream>

using namespace mst;

TEST_SUITE("common") {

TEST_CASE("sha256 of known strings") {
    CHECK(sha256_hex(std::string_view("")) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex(std::string_view("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("fixed formatting rounds and never prints negative zero") {
    CHECK(format_fixed(0.7749, 2) == "0.77");
    CHECK(format_fixed(37.94, 1) == "37.9");
    CHECK(format_fixed(-0.001, 2) == "0.00");
    CHECK(format_fixed(-1.5, 1) == "-1.5");
}

TEST_CASE("exact formatting round-trips") {
    for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456.789}) CHECK(std::stod(format_exact(v)) == v);
}

TEST_CASE("CSV reading handles quotes, comments and blank lines") {
    testing_support::TempDir dir("csv");
    {
        std::ofstream out(dir / "t.csv");
        out << "# comment\n\na,b,c\n1,\"x,y\",\"say \"\"hi\"\"\"\n 2 , 3 ,\n";
    }
    auto t = read_csv(dir / "t.csv");
    CHECK(t.header == std::vector<std::string>{"a", "b", "c"});
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0].cells == std::vector<std::string>{"1", "x,y", "say \"hi\""});
    CHECK(t.rows[1].cells == std::vector<std::string>{"2", "3", ""});
    CHECK(t.rows[1].line == 5);
    CHECK(t.column("c") == 2);
    CHECK(t.column("z") == -1);
}

TEST_CASE("CSV escaping is the inverse of reading") {
    CHECK(csv_escape("plain") == "plain");
    CHECK(csv_escape("a,b") == "\"a,b\"");
    CHECK(csv_escape("q\"") == "\"q\"\"\"");
}

TEST_CASE("unterminated quote is a format error") {
    testing_support::TempDir dir("csvbad");
    {
        std::ofstream out(dir / "t.csv");
        out << "a\n\"open\n";
    }
    try {
        read_csv(dir / "t.csv");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == "format");
    }
}

TEST_CASE("split and trim") {
    CHECK(split("a,,b", ',') == std::vector<std::string>{"a", "", "b"});
    CHECK(split("", ',') == std::vector<std::string>{""});
    CHECK(trim("  x y \t") == "x y");
    CHECK(trim("   ").empty());
}

TEST_CASE("missing files raise io errors") {
    try {
        read_text_file("/nonexistent/file.txt");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == "io");
    }
}

}
