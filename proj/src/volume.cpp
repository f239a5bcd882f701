#include "mst/volume.hpp"

#include "json.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

namespace mst {

namespace {

constexpr char kRawMagic[5] = {'M', 'S', 'T', 'V', '1'};
constexpr std::uint8_t kRawFloat32 = 1;
constexpr std::size_t kRawHeaderSize = 5 + 1 + 3 * 4;

std::vector<std::uint8_t> read_all_gz(const std::filesystem::path& path) {
    // gzread passes uncompressed files through unchanged.
    gzFile f = gzopen(path.c_str(), "rb");
    if (f == nullptr) throw Error("io", "cannot open " + path.string());
    std::vector<std::uint8_t> out;
    std::uint8_t buf[1 << 16];
    int n = 0;
    while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
    int err = 0;
    const char* msg = gzerror(f, &err);
    gzclose(f);
    if (n < 0 || (err != Z_OK && err != Z_STREAM_END)) {
        throw Error("io", "read failed for " + path.string() + ": " + (msg ? msg : "?"));
    }
    return out;
}

std::uint32_t read_u32_le(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

float read_f32_le(const std::uint8_t* p) {
    return std::bit_cast<float>(read_u32_le(p));
}

void check_finite(const Volume& v, const std::filesystem::path& path) {
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
        if (!std::isfinite(v.voxels[i])) {
            std::size_t x = i % static_cast<std::size_t>(v.shape.x);
            std::size_t y = (i / static_cast<std::size_t>(v.shape.x)) % static_cast<std::size_t>(v.shape.y);
            std::size_t z = i / (static_cast<std::size_t>(v.shape.x) * static_cast<std::size_t>(v.shape.y));
            throw Error("validation", path.string() + ": non-finite voxel at (z=" + std::to_string(z) +
                                          ", y=" + std::to_string(y) + ", x=" + std::to_string(x) + ")");
        }
    }
}

Volume parse_raw_tensor(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path,
                        SequenceId id) {
    if (bytes.size() < kRawHeaderSize) throw Error("format", path.string() + ": truncated raw-tensor header");
    if (bytes[5] != kRawFloat32) {
        throw Error("format", path.string() + ": unsupported raw-tensor dtype code " + std::to_string(bytes[5]));
    }
    Shape3 s{static_cast<int>(read_u32_le(&bytes[6])), static_cast<int>(read_u32_le(&bytes[10])),
             static_cast<int>(read_u32_le(&bytes[14]))};
    if (s.z < 1 || s.y < 1 || s.x < 1) throw Error("format", path.string() + ": zero-sized dimension");
    std::size_t expected = kRawHeaderSize + s.count() * 4;
    if (bytes.size() != expected) {
        throw Error("format", path.string() + ": payload size mismatch (header implies " +
                                  std::to_string(expected) + " bytes, file has " +
                                  std::to_string(bytes.size()) + ")");
    }
    Volume v(s, id);
    const std::uint8_t* p = bytes.data() + kRawHeaderSize;
    for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = read_f32_le(p + 4 * i);
    return v;
}

template <typename T>
T load_scalar(const std::uint8_t* p, bool swap) {
    std::array<std::uint8_t, sizeof(T)> b;
    std::memcpy(b.data(), p, sizeof(T));
    if (swap) std::reverse(b.begin(), b.end());
    T v;
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
}

Volume parse_nifti(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path,
                   SequenceId id) {
    if (bytes.size() < 348) throw Error("format", path.string() + ": truncated NIfTI header");
    bool swap = false;
    if (load_scalar<std::int32_t>(bytes.data(), false) != 348) {
        if (load_scalar<std::int32_t>(bytes.data(), true) != 348) {
            throw Error("format", path.string() + ": not a NIfTI-1 or raw-tensor file");
        }
        swap = true;
    }
    if (std::memcmp(&bytes[344], "n+1", 3) != 0 && std::memcmp(&bytes[344], "ni1", 3) != 0) {
        throw Error("format", path.string() + ": bad NIfTI magic");
    }
    if (std::memcmp(&bytes[344], "ni1", 3) == 0) {
        throw Error("format", path.string() + ": two-file NIfTI (.hdr/.img) is not supported");
    }
    std::array<std::int16_t, 8> dim{};
    for (int i = 0; i < 8; ++i) dim[i] = load_scalar<std::int16_t>(&bytes[40 + 2 * i], swap);
    if (dim[0] < 2 || dim[0] > 7) throw Error("format", path.string() + ": unsupported dim[0]");
    for (int i = 4; i <= dim[0]; ++i) {
        if (dim[i] > 1) throw Error("format", path.string() + ": only single 3D volumes are supported");
    }
    Shape3 s{dim[0] >= 3 ? dim[3] : 1, dim[2], dim[1]};
    if (s.z < 1 || s.y < 1 || s.x < 1) throw Error("format", path.string() + ": zero-sized dimension");
    auto datatype = load_scalar<std::int16_t>(&bytes[70], swap);
    std::array<float, 8> pixdim{};
    for (int i = 0; i < 8; ++i) pixdim[i] = load_scalar<float>(&bytes[76 + 4 * i], swap);
    auto vox_offset = static_cast<std::size_t>(load_scalar<float>(&bytes[108], swap));
    float slope = load_scalar<float>(&bytes[112], swap);
    float inter = load_scalar<float>(&bytes[116], swap);
    if (slope == 0.0f || !std::isfinite(slope)) {
        slope = 1.0f;
        inter = 0.0f;
    }

    std::size_t elem = 0;
    switch (datatype) {
        case 2: case 256: elem = 1; break;
        case 4: case 512: elem = 2; break;
        case 8: case 16: case 768: elem = 4; break;
        case 64: elem = 8; break;
        default: throw Error("format", path.string() + ": unsupported NIfTI datatype " + std::to_string(datatype));
    }
    if (vox_offset < 348) vox_offset = 352;
    std::size_t need = vox_offset + s.count() * elem;
    if (bytes.size() < need) {
        throw Error("format", path.string() + ": payload size mismatch (need " + std::to_string(need) +
                                  " bytes, have " + std::to_string(bytes.size()) + ")");
    }
    Volume v(s, id);
    const std::uint8_t* p = bytes.data() + vox_offset;
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
        const std::uint8_t* q = p + i * elem;
        double raw = 0.0;
        switch (datatype) {
            case 2: raw = *q; break;
            case 256: raw = static_cast<std::int8_t>(*q); break;
            case 4: raw = load_scalar<std::int16_t>(q, swap); break;
            case 512: raw = load_scalar<std::uint16_t>(q, swap); break;
            case 8: raw = load_scalar<std::int32_t>(q, swap); break;
            case 768: raw = load_scalar<std::uint32_t>(q, swap); break;
            case 16: raw = load_scalar<float>(q, swap); break;
            case 64: raw = load_scalar<double>(q, swap); break;
        }
        v.voxels[i] = static_cast<float>(raw * slope + inter);
    }
    if (pixdim[1] > 0 && pixdim[2] > 0 && (dim[0] < 3 || pixdim[3] > 0)) {
        v.spacing_mm = Spacing{dim[0] >= 3 ? pixdim[3] : 1.0, pixdim[2], pixdim[1]};
    }
    return v;
}

// Linear interpolation that is exact for equal endpoints and never leaves
// [min(a, b), max(a, b)].
inline float lerp_clamped(float a, float b, float w) {
    if (a == b) return a;
    float v = a + w * (b - a);
    return std::clamp(v, std::min(a, b), std::max(a, b));
}

struct AxisSample {
    int i0 = 0, i1 = 0;
    float w = 0.0f;
};

std::vector<AxisSample> axis_samples(int in, int out) {
    std::vector<AxisSample> s(static_cast<std::size_t>(out));
    for (int o = 0; o < out; ++o) {
        double src = 0.0;
        if (in > 1) {
            src = out > 1 ? static_cast<double>(o) * (in - 1) / (out - 1) : (in - 1) / 2.0;
        }
        int i0 = std::min(static_cast<int>(std::floor(src)), in - 1);
        int i1 = std::min(i0 + 1, in - 1);
        s[static_cast<std::size_t>(o)] = {i0, i1, static_cast<float>(src - i0)};
    }
    return s;
}

}  // namespace

Volume load_volume(const std::filesystem::path& path, SequenceId id) {
    if (!std::filesystem::exists(path)) throw Error("io", "volume not found: " + path.string());
    auto bytes = read_all_gz(path);
    Volume v = (bytes.size() >= 5 && std::memcmp(bytes.data(), kRawMagic, 5) == 0)
                   ? parse_raw_tensor(bytes, path, id)
                   : parse_nifti(bytes, path, id);
    check_finite(v, path);
    return v;
}

void save_raw_tensor(const Volume& v, const std::filesystem::path& path) {
    std::vector<std::uint8_t> out(kRawMagic, kRawMagic + 5);
    out.push_back(kRawFloat32);
    put_u32_le(out, static_cast<std::uint32_t>(v.shape.z));
    put_u32_le(out, static_cast<std::uint32_t>(v.shape.y));
    put_u32_le(out, static_cast<std::uint32_t>(v.shape.x));
    out.reserve(out.size() + v.voxels.size() * 4);
    for (float f : v.voxels) put_u32_le(out, std::bit_cast<std::uint32_t>(f));
    write_text_file(path, std::string_view(reinterpret_cast<const char*>(out.data()), out.size()));
}

void save_nifti(const Volume& v, const std::filesystem::path& path) {
    static_assert(std::endian::native == std::endian::little, "NIfTI writer assumes little-endian host");
    std::vector<std::uint8_t> hdr(352, 0);
    auto put = [&](std::size_t off, auto value) { std::memcpy(&hdr[off], &value, sizeof value); };
    put(0, std::int32_t{348});
    std::int16_t dim[8] = {3, static_cast<std::int16_t>(v.shape.x), static_cast<std::int16_t>(v.shape.y),
                           static_cast<std::int16_t>(v.shape.z), 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) put(40 + 2 * static_cast<std::size_t>(i), dim[i]);
    put(70, std::int16_t{16});
    put(72, std::int16_t{32});
    Spacing sp = v.spacing_mm.value_or(Spacing{1.0, 1.0, 1.0});
    float pixdim[8] = {1.0f, static_cast<float>(sp[2]), static_cast<float>(sp[1]), static_cast<float>(sp[0]),
                       1.0f, 1.0f, 1.0f, 1.0f};
    for (int i = 0; i < 8; ++i) put(76 + 4 * static_cast<std::size_t>(i), pixdim[i]);
    put(108, 352.0f);
    put(112, 1.0f);
    put(116, 0.0f);
    put(123, std::uint8_t{10});  // xyzt_units: mm, s
    std::memcpy(&hdr[344], "n+1\0", 4);

    std::string payload(reinterpret_cast<const char*>(hdr.data()), hdr.size());
    payload.append(reinterpret_cast<const char*>(v.voxels.data()), v.voxels.size() * sizeof(float));
    if (path.extension() == ".gz") {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        gzFile f = gzopen(path.c_str(), "wb6");
        if (f == nullptr) throw Error("io", "cannot write " + path.string());
        int wrote = gzwrite(f, payload.data(), static_cast<unsigned>(payload.size()));
        gzclose(f);
        if (wrote != static_cast<int>(payload.size())) throw Error("io", "write failed for " + path.string());
    } else {
        write_text_file(path, payload);
    }
}

Volume subtract_t1(const Volume& pre, const Volume& post1) {
    if (!(pre.shape == post1.shape)) throw Error("shape", "subtract_t1: pre and post1 shapes differ");
    Volume out(pre.shape, SequenceId::T1_sub);
    out.spacing_mm = post1.spacing_mm ? post1.spacing_mm : pre.spacing_mm;
    for (std::size_t i = 0; i < out.voxels.size(); ++i) {
        out.voxels[i] = std::max(post1.voxels[i] - pre.voxels[i], 0.0f);
    }
    return out;
}

std::pair<Volume, Volume> split_laterality(const Volume& v) {
    if (v.shape.x < 2) throw Error("shape", "split_laterality: X must be >= 2");
    int mid = v.shape.x / 2;
    Volume left({v.shape.z, v.shape.y, mid}, v.sequence_id);
    Volume right({v.shape.z, v.shape.y, v.shape.x - mid}, v.sequence_id);
    left.spacing_mm = right.spacing_mm = v.spacing_mm;
    for (int z = 0; z < v.shape.z; ++z) {
        for (int y = 0; y < v.shape.y; ++y) {
            const float* row = &v.voxels[v.index(z, y, 0)];
            std::copy(row, row + mid, &left.voxels[left.index(z, y, 0)]);
            std::copy(row + mid, row + v.shape.x, &right.voxels[right.index(z, y, 0)]);
        }
    }
    return {std::move(left), std::move(right)};
}

Volume resample(const Volume& v, Shape3 target) {
    if (target.z < 1 || target.y < 1 || target.x < 1) throw Error("shape", "resample: empty target shape");
    if (v.shape == target) return v;

    // Separable passes: X, then Y, then Z.
    Volume cur = v;
    if (cur.shape.x != target.x) {
        auto xs = axis_samples(cur.shape.x, target.x);
        Volume next({cur.shape.z, cur.shape.y, target.x}, v.sequence_id);
        for (int z = 0; z < cur.shape.z; ++z)
            for (int y = 0; y < cur.shape.y; ++y) {
                const float* row = &cur.voxels[cur.index(z, y, 0)];
                float* dst = &next.voxels[next.index(z, y, 0)];
                for (int x = 0; x < target.x; ++x) {
                    const auto& s = xs[static_cast<std::size_t>(x)];
                    dst[x] = lerp_clamped(row[s.i0], row[s.i1], s.w);
                }
            }
        cur = std::move(next);
    }
    if (cur.shape.y != target.y) {
        auto ys = axis_samples(cur.shape.y, target.y);
        Volume next({cur.shape.z, target.y, cur.shape.x}, v.sequence_id);
        for (int z = 0; z < cur.shape.z; ++z)
            for (int y = 0; y < target.y; ++y) {
                const auto& s = ys[static_cast<std::size_t>(y)];
                const float* a = &cur.voxels[cur.index(z, s.i0, 0)];
                const float* b = &cur.voxels[cur.index(z, s.i1, 0)];
                float* dst = &next.voxels[next.index(z, y, 0)];
                for (int x = 0; x < cur.shape.x; ++x) dst[x] = lerp_clamped(a[x], b[x], s.w);
            }
        cur = std::move(next);
    }
    if (cur.shape.z != target.z) {
        auto zs = axis_samples(cur.shape.z, target.z);
        Volume next({target.z, cur.shape.y, cur.shape.x}, v.sequence_id);
        const std::size_t plane = static_cast<std::size_t>(cur.shape.y) * static_cast<std::size_t>(cur.shape.x);
        for (int z = 0; z < target.z; ++z) {
            const auto& s = zs[static_cast<std::size_t>(z)];
            const float* a = &cur.voxels[cur.index(s.i0, 0, 0)];
            const float* b = &cur.voxels[cur.index(s.i1, 0, 0)];
            float* dst = &next.voxels[next.index(z, 0, 0)];
            for (std::size_t i = 0; i < plane; ++i) dst[i] = lerp_clamped(a[i], b[i], s.w);
        }
        cur = std::move(next);
    }
    if (v.spacing_mm) {
        const Spacing& sp = *v.spacing_mm;
        auto scale = [](double spacing, int in, int out) {
            return out > 1 && in > 1 ? spacing * (in - 1) / (out - 1) : spacing * in / out;
        };
        cur.spacing_mm = Spacing{scale(sp[0], v.shape.z, target.z), scale(sp[1], v.shape.y, target.y),
                                 scale(sp[2], v.shape.x, target.x)};
    }
    cur.sequence_id = v.sequence_id;
    return cur;
}

double percentile(std::vector<float> values, double pct) {
    if (values.empty()) throw Error("precondition", "percentile of empty sample");
    pct = std::clamp(pct, 0.0, 100.0);
    double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    double frac = pos - static_cast<double>(lo);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
    double a = values[lo];
    if (frac == 0.0 || lo + 1 >= values.size()) return a;
    double b = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end());
    return a + frac * (b - a);
}

NormalizeResult normalize(const Volume& v, double lo_pct, double hi_pct) {
    if (!(lo_pct >= 0.0 && lo_pct < hi_pct && hi_pct <= 100.0)) {
        throw Error("precondition", "normalize: require 0 <= lo_pct < hi_pct <= 100");
    }
    NormalizeResult r;
    r.volume = Volume(v.shape, v.sequence_id);
    r.volume.spacing_mm = v.spacing_mm;
    r.clip_lo = percentile(v.voxels, lo_pct);
    r.clip_hi = percentile(v.voxels, hi_pct);
    if (!(r.clip_hi > r.clip_lo)) {
        r.degenerate = true;
        return r;
    }
    const double range = r.clip_hi - r.clip_lo;
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
        double c = std::clamp(static_cast<double>(v.voxels[i]), r.clip_lo, r.clip_hi);
        r.volume.voxels[i] = static_cast<float>(std::clamp((c - r.clip_lo) / range, 0.0, 1.0));
    }
    return r;
}

void check_stack(const SequenceStack& s) {
    if (s.channels < 1 || s.channels > kMaxChannels) {
        throw Error("shape", "stack must have 1-3 channels, has " + std::to_string(s.channels));
    }
    if (static_cast<int>(s.channel_map.size()) != s.channels) {
        throw Error("shape", "channel_map length does not match channel count");
    }
    if (s.data.size() != static_cast<std::size_t>(s.channels) * SequenceStack::kChannelSize) {
        throw Error("shape", "stack data size does not match (C, 38, 224, 224)");
    }
    for (float f : s.data) {
        if (!(f >= 0.0f && f <= 1.0f)) throw Error("shape", "stack values must lie in [0, 1]");
    }
}

SequenceStack stack_sequences(const std::vector<Volume>& volumes) {
    if (volumes.empty() || volumes.size() > kMaxChannels) {
        throw Error("shape", "stack_sequences: expected 1-3 volumes, got " + std::to_string(volumes.size()));
    }
    SequenceStack s;
    s.channels = static_cast<int>(volumes.size());
    s.data.reserve(volumes.size() * SequenceStack::kChannelSize);
    for (const auto& v : volumes) {
        if (!(v.shape == kTargetShape)) {
            throw Error("shape", "stack_sequences: " + to_string(v.sequence_id) + " has shape (" +
                                     std::to_string(v.shape.z) + "," + std::to_string(v.shape.y) + "," +
                                     std::to_string(v.shape.x) + "), expected (38,224,224)");
        }
        s.channel_map.push_back(v.sequence_id);
        s.data.insert(s.data.end(), v.voxels.begin(), v.voxels.end());
    }
    check_stack(s);
    return s;
}

std::array<int, 3> backbone_channel_map(int channels) {
    switch (channels) {
        case 1: return {0, 0, 0};
        case 2: return {0, 1, 0};
        case 3: return {0, 1, 2};
        default: throw Error("shape", "backbone_channel_map: channels must be 1-3");
    }
}

SequenceStack to_three_channels(const SequenceStack& s) {
    auto map = backbone_channel_map(s.channels);
    SequenceStack out;
    out.channels = 3;
    out.data.reserve(3 * SequenceStack::kChannelSize);
    for (int c : map) {
        out.channel_map.push_back(s.channel_map[static_cast<std::size_t>(c)]);
        auto begin = s.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(c) * SequenceStack::kChannelSize);
        out.data.insert(out.data.end(), begin, begin + static_cast<std::ptrdiff_t>(SequenceStack::kChannelSize));
    }
    return out;
}

AugmentParams sample_augment_params(const AugmentBounds& bounds, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    AugmentParams p;
    p.rotation_deg = unit(rng) * bounds.max_rotation_deg;
    p.flip_x = bounds.flips && unit(rng) < 0.5;
    p.flip_y = bounds.flips && unit(rng) < 0.5;
    p.invert_intensity = bounds.inversion && unit(rng) < 0.5;
    p.noise_sd = unit(rng) * bounds.max_noise_sd;
    p.rng_seed = rng();
    return p;
}

SequenceStack augment(const SequenceStack& s, const AugmentParams& p) {
    SequenceStack out = s;
    constexpr int n = kImageSize;

    if (p.rotation_deg != 0.0) {
        double c = 0.0, sn = 0.0;
        double deg = std::fmod(p.rotation_deg, 360.0);
        if (deg == 90.0) { c = 0.0; sn = 1.0; }
        else if (deg == 180.0) { c = -1.0; sn = 0.0; }
        else if (deg == 270.0) { c = 0.0; sn = -1.0; }
        else {
            double rad = deg * std::numbers::pi / 180.0;
            c = std::cos(rad);
            sn = std::sin(rad);
        }
        const double center = (n - 1) / 2.0;
        // Inverse mapping: output (x, y) samples the input at R^T (o - c) + c.
        std::vector<float> tmp(SequenceStack::kSliceSize);
        for (int ch = 0; ch < s.channels; ++ch) {
            for (int z = 0; z < kSlices; ++z) {
                auto src = s.slice(ch, z);
                auto sample = [&](int yy, int xx) -> float {
                    if (yy < 0 || yy >= n || xx < 0 || xx >= n) return 0.0f;
                    return src[static_cast<std::size_t>(yy) * n + static_cast<std::size_t>(xx)];
                };
                for (int y = 0; y < n; ++y) {
                    for (int x = 0; x < n; ++x) {
                        double dx = x - center, dy = y - center;
                        double sx = c * dx + sn * dy + center;
                        double sy = -sn * dx + c * dy + center;
                        double fx = std::floor(sx), fy = std::floor(sy);
                        int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
                        double wx = sx - fx, wy = sy - fy;
                        double v = (1 - wy) * ((1 - wx) * sample(y0, x0) + wx * sample(y0, x0 + 1)) +
                                   wy * ((1 - wx) * sample(y0 + 1, x0) + wx * sample(y0 + 1, x0 + 1));
                        tmp[static_cast<std::size_t>(y) * n + static_cast<std::size_t>(x)] =
                            static_cast<float>(std::clamp(v, 0.0, 1.0));
                    }
                }
                std::copy(tmp.begin(), tmp.end(), out.slice(ch, z).begin());
            }
        }
    }

    if (p.flip_x || p.flip_y) {
        for (int ch = 0; ch < s.channels; ++ch) {
            for (int z = 0; z < kSlices; ++z) {
                auto sl = out.slice(ch, z);
                if (p.flip_x) {
                    for (int y = 0; y < n; ++y) {
                        auto row = sl.begin() + static_cast<std::ptrdiff_t>(y) * n;
                        std::reverse(row, row + n);
                    }
                }
                if (p.flip_y) {
                    for (int y = 0; y < n / 2; ++y) {
                        std::swap_ranges(sl.begin() + static_cast<std::ptrdiff_t>(y) * n,
                                         sl.begin() + static_cast<std::ptrdiff_t>(y + 1) * n,
                                         sl.begin() + static_cast<std::ptrdiff_t>(n - 1 - y) * n);
                    }
                }
            }
        }
    }

    if (p.invert_intensity) {
        for (float& f : out.data) f = 1.0f - f;
    }

    if (p.noise_sd > 0.0) {
        std::mt19937_64 rng(p.rng_seed);
        std::normal_distribution<double> noise(0.0, p.noise_sd);
        for (float& f : out.data) f = static_cast<float>(std::clamp(f + noise(rng), 0.0, 1.0));
    }
    return out;
}

PreprocessedExam preprocess_exam(const CohortManifest& manifest, const ExamRecord& record,
                                 const std::vector<SequenceId>& sequences,
                                 const PreprocessOptions& options) {
    if (sequences.empty() || sequences.size() > kMaxChannels) {
        throw Error("precondition", "preprocess: expected 1-3 sequences");
    }
    PreprocessedExam out;
    std::vector<Volume> volumes;
    for (SequenceId id : sequences) {
        auto it = record.sequence_paths.find(id);
        if (it == record.sequence_paths.end()) {
            throw Error("compatibility", "exam '" + record.exam_id + "' lacks sequence " + to_string(id));
        }
        Volume v = load_volume(manifest.resolve(it->second), id);
        if (options.split_laterality) {
            auto [left, right] = split_laterality(v);
            v = record.laterality == Laterality::left ? std::move(left) : std::move(right);
        }
        auto norm = normalize(resample(v, kTargetShape), options.lo_pct, options.hi_pct);
        out.normalization.push_back({id, norm.clip_lo, norm.clip_hi, norm.degenerate});
        volumes.push_back(std::move(norm.volume));
    }
    out.stack = stack_sequences(volumes);
    return out;
}

void write_preprocessed(const PreprocessedExam& exam, const std::string& exam_id,
                        const std::filesystem::path& dir) {
    auto exam_dir = dir / exam_id;
    std::filesystem::create_directories(exam_dir);
    nlohmann::json side;
    side["exam_id"] = exam_id;
    side["channel_map"] = nlohmann::json::array();
    side["normalization"] = nlohmann::json::object();
    for (int c = 0; c < exam.stack.channels; ++c) {
        SequenceId id = exam.stack.channel_map[static_cast<std::size_t>(c)];
        Volume v(kTargetShape, id);
        auto begin = exam.stack.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(c) * SequenceStack::kChannelSize);
        std::copy(begin, begin + static_cast<std::ptrdiff_t>(SequenceStack::kChannelSize), v.voxels.begin());
        save_raw_tensor(v, exam_dir / (to_string(id) + ".mstv"));
        side["channel_map"].push_back(to_string(id));
    }
    for (const auto& n : exam.normalization) {
        side["normalization"][to_string(n.sequence)] = {
            {"clip_lo", n.clip_lo}, {"clip_hi", n.clip_hi}, {"degenerate", n.degenerate}};
    }
    write_text_file(exam_dir / "sidecar.json", side.dump(2) + "\n");
}

std::optional<SequenceStack> read_preprocessed(const std::string& exam_id,
                                               const std::vector<SequenceId>& sequences,
                                               const std::filesystem::path& dir) {
    std::vector<Volume> volumes;
    for (SequenceId id : sequences) {
        auto path = dir / exam_id / (to_string(id) + ".mstv");
        if (!std::filesystem::exists(path)) return std::nullopt;
        volumes.push_back(load_volume(path, id));
    }
    return stack_sequences(volumes);
}

}  // namespace mst
