#include "mst/phantom.hpp"

#include "mst/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>

namespace mst {

namespace {

// Cohort composition used to sample categorical covariates.
constexpr double kBenignBirads[] = {22, 1341, 107};   // BI-RADS 1, 2, 3
constexpr double kSuspiciousBirads[] = {133, 61, 183};  // BI-RADS 4, 5, 6
constexpr double kBpeGrades[] = {511, 899, 339, 98};
constexpr double kBpdGrades[] = {376, 975, 381, 115};

constexpr double kBpeLevel[] = {0.04, 0.10, 0.18, 0.28};
constexpr double kBpdLevel[] = {0.05, 0.12, 0.20, 0.30};
constexpr double kT1Noise = 0.01;
// Enhancing chest wall behind the breasts; sets the upper intensity
// percentile of lesion-free subtraction volumes.
constexpr double kWallEnhancement = 0.85;
constexpr int kWallRows = 3;  // rows behind the chest wall at y = Y - 4

struct Field {
    Shape3 shape;
    std::vector<float> v;

    explicit Field(Shape3 s) : shape(s), v(s.count(), 0.0f) {}
    float& at(int z, int y, int x) {
        return v[(static_cast<std::size_t>(z) * shape.y + static_cast<std::size_t>(y)) * shape.x + static_cast<std::size_t>(x)];
    }
    float at(int z, int y, int x) const {
        return v[(static_cast<std::size_t>(z) * shape.y + static_cast<std::size_t>(y)) * shape.x + static_cast<std::size_t>(x)];
    }
};

void add_blob(Field& f, double cz, double cy, double cx, double sz, double sy, double sx, double amp) {
    const int z0 = std::max(0, static_cast<int>(std::floor(cz - 3 * sz)));
    const int z1 = std::min(f.shape.z - 1, static_cast<int>(std::ceil(cz + 3 * sz)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - 3 * sy)));
    const int y1 = std::min(f.shape.y - 1, static_cast<int>(std::ceil(cy + 3 * sy)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - 3 * sx)));
    const int x1 = std::min(f.shape.x - 1, static_cast<int>(std::ceil(cx + 3 * sx)));
    for (int z = z0; z <= z1; ++z) {
        const double dz = (z - cz) / sz;
        for (int y = y0; y <= y1; ++y) {
            const double dy = (y - cy) / sy;
            for (int x = x0; x <= x1; ++x) {
                const double dx = (x - cx) / sx;
                f.at(z, y, x) += static_cast<float>(amp * std::exp(-0.5 * (dz * dz + dy * dy + dx * dx)));
            }
        }
    }
}

// Soft ellipsoid, ~1 inside and ~0 outside; radii in voxels. Combined by max.
void add_ellipsoid(Field& f, double cz, double cy, double cx, double rz, double ry, double rx) {
    const int z0 = std::max(0, static_cast<int>(std::floor(cz - 1.6 * rz - 1)));
    const int z1 = std::min(f.shape.z - 1, static_cast<int>(std::ceil(cz + 1.6 * rz + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - 1.6 * ry - 1)));
    const int y1 = std::min(f.shape.y - 1, static_cast<int>(std::ceil(cy + 1.6 * ry + 1)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - 1.6 * rx - 1)));
    const int x1 = std::min(f.shape.x - 1, static_cast<int>(std::ceil(cx + 1.6 * rx + 1)));
    for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double q = std::sqrt(std::pow((z - cz) / rz, 2) + std::pow((y - cy) / ry, 2) +
                                           std::pow((x - cx) / rx, 2));
                const float w = static_cast<float>(1.0 / (1.0 + std::exp((q - 1.0) / 0.12)));
                f.at(z, y, x) = std::max(f.at(z, y, x), w);
            }
}

template <std::size_t N>
int sample_index(const double (&weights)[N], std::mt19937_64& rng) {
    std::discrete_distribution<int> d(std::begin(weights), std::end(weights));
    return d(rng);
}

std::uint64_t patient_seed(std::uint64_t seed, int patient) {
    auto h = sha256_hex("phantom|" + std::to_string(seed) + "|" + std::to_string(patient));
    return std::stoull(h.substr(0, 16), nullptr, 16);
}

struct Side {
    bool exists = false;
    bool positive = false;
    LesionType type = LesionType::mass;
    double size_mm = 0.0;
    LesionLocation location;
    double contrast = 1.0;
};

struct Breast {
    int x_offset = 0;
    double cz = 0, cy = 0, cx = 0;  // ellipsoid centre: cy at the chest wall
    double az = 0, ay = 0, ax = 0;
};

bool inside(const Breast& b, int z, int y, int x) {
    if (y > b.cy) return false;
    const double q = std::pow((z - b.cz) / b.az, 2) + std::pow((y - b.cy) / b.ay, 2) +
                     std::pow((x - b.x_offset - b.cx) / b.ax, 2);
    return q <= 1.0;
}

}  // namespace

CohortManifest generate_phantoms(const PhantomOptions& opt, const std::filesystem::path& out_dir) {
    if (opt.n < 4) throw Error("precondition", "phantom cohort needs n >= 4");
    if (!(opt.positive_fraction > 0.0 && opt.positive_fraction < 1.0)) {
        throw Error("precondition", "positive fraction must lie strictly between 0 and 1");
    }
    if (opt.native_shape.x < 4 || opt.native_shape.x % 2 != 0 || opt.native_shape.y < 8 || opt.native_shape.z < 4) {
        throw Error("precondition", "phantom native shape too small or X odd");
    }
    for (auto s : opt.sequences) {
        if (!is_manifest_sequence(s)) throw Error("precondition", "phantom cannot write sequence " + to_string(s));
    }

    const int n_patients = (opt.n + 1) / 2;
    const long n_pos = std::lround(opt.n * opt.positive_fraction);
    std::vector<int> exam_order(static_cast<std::size_t>(opt.n));
    std::iota(exam_order.begin(), exam_order.end(), 0);
    std::mt19937_64 global(patient_seed(opt.seed, -1));
    std::shuffle(exam_order.begin(), exam_order.end(), global);
    std::vector<bool> positive(static_cast<std::size_t>(opt.n), false);
    for (long k = 0; k < n_pos; ++k) positive[static_cast<std::size_t>(exam_order[static_cast<std::size_t>(k)])] = true;

    const Shape3 shape = opt.native_shape;
    const int half = shape.x / 2;
    std::filesystem::create_directories(out_dir / "volumes");
    CohortManifest manifest;
    manifest.data_root = out_dir;

    for (int p = 0; p < n_patients; ++p) {
        std::mt19937_64 rng(patient_seed(opt.seed, p));
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::normal_distribution<double> gauss(0.0, 1.0);
        auto uni = [&](double a, double b) { return a + (b - a) * unit(rng); };

        char pid[32];
        std::snprintf(pid, sizeof pid, "P%04d", p + 1);
        const int bpe = sample_index(kBpeGrades, rng);
        const int bpd = sample_index(kBpdGrades, rng);

        Breast breasts[2];
        Field gland(shape), modulation(shape), lesion(shape), cysts(shape);
        std::vector<bool> mask(shape.count(), false);
        for (int s = 0; s < 2; ++s) {
            Breast& b = breasts[s];
            b.x_offset = s * half;
            b.cz = (shape.z - 1) / 2.0 + uni(-1, 1);
            b.cy = shape.y - 4.0;
            b.cx = (half - 1) / 2.0 + uni(-1.5, 1.5);
            b.az = shape.z * uni(0.42, 0.5);
            b.ay = shape.y * uni(0.72, 0.9);
            b.ax = half * uni(0.4, 0.47);
            for (int z = 0; z < shape.z; ++z)
                for (int y = 0; y < shape.y; ++y)
                    for (int x = b.x_offset; x < b.x_offset + half; ++x)
                        if (inside(b, z, y, x)) mask[(static_cast<std::size_t>(z) * shape.y + y) * shape.x + x] = true;

            const double zs = opt.spacing_mm[1] / opt.spacing_mm[0];  // voxel-size aspect
            for (int k = 0; k < 36; ++k) {
                const double cz = b.cz + gauss(rng) * b.az * 0.35;
                const double cy = b.cy - std::abs(gauss(rng)) * b.ay * 0.4;
                const double cx = b.x_offset + b.cx + gauss(rng) * b.ax * 0.35;
                const double sig = uni(2.0, 6.0);
                add_blob(gland, cz, cy, cx, sig * zs, sig, sig, uni(0.5, 1.2));
            }
            for (int k = 0; k < 6; ++k) {
                const double sig = uni(6.0, 12.0);
                add_blob(modulation, b.cz + gauss(rng) * b.az * 0.5, b.cy - unit(rng) * b.ay,
                         b.x_offset + b.cx + gauss(rng) * b.ax * 0.5, sig * zs, sig, sig, uni(0.5, 1.0));
            }
            const int n_cysts = static_cast<int>(uni(0, 3.999));
            for (int k = 0; k < n_cysts; ++k) {
                const double r = uni(1.0, 2.5);
                add_ellipsoid(cysts, b.cz + gauss(rng) * b.az * 0.3, b.cy - uni(0.2, 0.7) * b.ay,
                              b.x_offset + b.cx + gauss(rng) * b.ax * 0.3, r * zs, r, r);
            }
        }

        // Exams and lesions.
        Side sides[2];
        for (int s = 0; s < 2; ++s) {
            const int exam_index = 2 * p + s;
            if (exam_index >= opt.n) continue;
            Side& side = sides[s];
            side.exists = true;
            side.positive = positive[static_cast<std::size_t>(exam_index)];
            if (!side.positive) continue;

            const double t = unit(rng);
            side.type = t < 0.45 ? LesionType::mass : t < 0.8 ? LesionType::nme : LesionType::foci;
            const Breast& b = breasts[s];
            // Centre: a voxel well inside the breast.
            int cz = 0, cy = 0, cx = 0;
            for (int attempt = 0; attempt < 1000; ++attempt) {
                cz = static_cast<int>(std::lround(b.cz + uni(-0.6, 0.6) * b.az));
                cy = static_cast<int>(std::lround(b.cy - uni(0.15, 0.75) * b.ay));
                cx = static_cast<int>(std::lround(b.x_offset + b.cx + uni(-0.6, 0.6) * b.ax));
                if (cz >= 0 && cz < shape.z && cy >= 0 && cy < shape.y && inside(b, cz, cy, cx)) break;
            }
            const double mm_z = opt.spacing_mm[0], mm_y = opt.spacing_mm[1], mm_x = opt.spacing_mm[2];
            Field one(shape);
            if (side.type == LesionType::mass) {
                side.size_mm = std::clamp(std::exp(std::log(14.0) + 0.45 * gauss(rng)), 5.0, 45.0);
                const double r = side.size_mm / 2.0;
                add_ellipsoid(one, cz, cy, cx, r * uni(0.6, 1.0) / mm_z, r * uni(0.6, 1.0) / mm_y, r / mm_x);
                side.contrast = 0.9;
            } else if (side.type == LesionType::foci) {
                side.size_mm = uni(3.0, 4.9);
                const double r = side.size_mm / 2.0;
                add_ellipsoid(one, cz, cy, cx, r / mm_z, r / mm_y, r / mm_x);
                side.contrast = 0.95;
            } else {
                side.size_mm = std::clamp(std::exp(std::log(22.0) + 0.4 * gauss(rng)), 8.0, 60.0);
                const double angle = uni(0.0, 3.14159265358979);
                const double dz = uni(-0.3, 0.3);
                for (int k = 0; k < 7; ++k) {
                    const double f = uni(-0.5, 0.5) * side.size_mm;
                    const double r = std::max(2.5, uni(0.12, 0.2) * side.size_mm);
                    add_ellipsoid(one, cz + f * dz / mm_z, cy + f * std::sin(angle) / mm_y, cx + f * std::cos(angle) / mm_x,
                                  r / mm_z, r / mm_y, r / mm_x);
                }
                side.contrast = 0.6;
            }
            side.contrast *= opt.lesion_contrast * uni(0.85, 1.1);

            int zmin = shape.z, zmax = -1, ymin = shape.y, ymax = -1, xmin = shape.x, xmax = -1;
            for (int z = 0; z < shape.z; ++z)
                for (int y = 0; y < shape.y; ++y)
                    for (int x = b.x_offset; x < b.x_offset + half; ++x) {
                        const std::size_t i = (static_cast<std::size_t>(z) * shape.y + y) * shape.x + x;
                        float w = mask[i] ? one.v[i] : 0.0f;
                        one.v[i] = w;
                        lesion.v[i] = std::max(lesion.v[i], w * static_cast<float>(side.contrast));
                        if (w >= 0.5f) {
                            zmin = std::min(zmin, z), zmax = std::max(zmax, z);
                            ymin = std::min(ymin, y), ymax = std::max(ymax, y);
                            xmin = std::min(xmin, x - b.x_offset), xmax = std::max(xmax, x - b.x_offset);
                        }
                    }
            if (zmax < 0) {  // lesion clipped away entirely; fall back to its centre voxel
                zmin = zmax = cz, ymin = ymax = cy, xmin = xmax = cx - b.x_offset;
                lesion.at(cz, cy, cx) = static_cast<float>(side.contrast);
            }
            const double fz = (kSlices - 1.0) / (shape.z - 1.0);
            const double fy = (kImageSize - 1.0) / (shape.y - 1.0);
            const double fx = (kImageSize - 1.0) / (half - 1.0);
            side.location.slice_lo = std::max(0, static_cast<int>(std::floor(zmin * fz)));
            side.location.slice_hi = std::min(kSlices - 1, static_cast<int>(std::ceil(zmax * fz)));
            side.location.y0 = std::max(0, static_cast<int>(std::floor(ymin * fy)));
            side.location.y1 = std::min(kImageSize, static_cast<int>(std::ceil(ymax * fy)) + 1);
            side.location.x0 = std::max(0, static_cast<int>(std::floor(xmin * fx)));
            side.location.x1 = std::min(kImageSize, static_cast<int>(std::ceil(xmax * fx)) + 1);
        }

        // Sequences.
        const std::size_t count = shape.count();
        std::vector<float> g(count), m(count);
        for (std::size_t i = 0; i < count; ++i) {
            g[i] = mask[i] ? static_cast<float>(1.0 - std::exp(-gland.v[i])) : 0.0f;
            m[i] = static_cast<float>(0.6 + 0.8 * std::min(1.0f, modulation.v[i]));
        }
        auto noisy = [&](double sd) { return static_cast<float>(sd * gauss(rng)); };
        std::vector<float> wall(count, 0.0f);
        const double wall_gain = kWallEnhancement * uni(0.9, 1.1);
        for (int z = 0; z < shape.z; ++z)
            for (int y = shape.y - kWallRows; y < shape.y; ++y)
                for (int x = 0; x < shape.x; ++x)
                    wall[(static_cast<std::size_t>(z) * shape.y + y) * shape.x + x] = 1.0f;

        Volume pre(shape, SequenceId::T1_pre), post(shape, SequenceId::T1_post1);
        Volume dwi(shape, SequenceId::DWI_1500), t2(shape, SequenceId::T2w);
        for (std::size_t i = 0; i < count; ++i) {
            const float in = mask[i] ? 1.0f : 0.0f;
            const float base = in * (0.85f * (1.0f - g[i]) + 0.45f * g[i]);
            const float w = wall[i];
            pre.voxels[i] = base + 0.5f * w + noisy(kT1Noise);
            post.voxels[i] = base + in * static_cast<float>(kBpeLevel[bpe]) * g[i] * m[i] + lesion.v[i] +
                             w * static_cast<float>(0.5 + wall_gain) + noisy(kT1Noise);
            dwi.voxels[i] = in * (0.15f + static_cast<float>(kBpdLevel[bpd]) * g[i] * m[i]) + 0.75f * lesion.v[i] +
                            0.3f * w + std::abs(noisy(0.03));
            t2.voxels[i] = in * (0.3f * (1.0f - g[i]) + 0.55f * g[i] + 0.5f * cysts.v[i]) + 0.35f * lesion.v[i] +
                           0.4f * w + noisy(0.03);
        }
        for (Volume* v : {&pre, &post, &dwi, &t2}) v->spacing_mm = opt.spacing_mm;
        Volume sub = subtract_t1(pre, post);

        std::map<SequenceId, std::string> paths;
        for (auto seq : opt.sequences) {
            const std::string rel = std::string("volumes/") + pid + "_" + to_string(seq) + ".nii.gz";
            const Volume& v = seq == SequenceId::T1_sub ? sub : seq == SequenceId::DWI_1500 ? dwi : t2;
            save_nifti(v, out_dir / rel);
            paths[seq] = rel;
        }

        for (int s = 0; s < 2; ++s) {
            const Side& side = sides[s];
            if (!side.exists) continue;
            ExamRecord r;
            r.patient_id = pid;
            r.laterality = s == 0 ? Laterality::left : Laterality::right;
            r.exam_id = std::string(pid) + (s == 0 ? "_L" : "_R");
            r.sequence_paths = paths;
            r.birads = side.positive ? 4 + sample_index(kSuspiciousBirads, rng) : 1 + sample_index(kBenignBirads, rng);
            r.label = binarize_label(*r.birads);
            r.bpe_grade = static_cast<ParenchymaGrade>(bpe);
            r.bpd_grade = static_cast<ParenchymaGrade>(bpd);
            if (side.positive) {
                r.lesion_size_mm = std::round(side.size_mm * 10.0) / 10.0;
                r.lesion_type = side.type;
                r.lesion_location = side.location;
            }
            manifest.records.push_back(std::move(r));
        }
    }
    save_manifest_csv(manifest, out_dir / "manifest.csv");
    return manifest;
}

}  // namespace mst
