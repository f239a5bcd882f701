#pragma once

#include "mst/cohort.hpp"
#include "mst/volume.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace mst {

struct PhantomOptions {
    int n = 100;                     // exams (two per patient, one per breast)
    double positive_fraction = 0.2;  // exactly round(n * fraction) suspicious exams
    std::uint64_t seed = 0;
    Shape3 native_shape{32, 64, 128};  // bilateral, X spans both breasts
    Spacing spacing_mm{3.0, 2.5, 2.5};
    std::vector<SequenceId> sequences{SequenceId::T1_sub, SequenceId::DWI_1500, SequenceId::T2w};
    double lesion_contrast = 1.0;   // scales every lesion signal
};

/// Synthetic bilateral breast volumes: a smooth glandular texture inside a
/// half-ellipsoid breast per side, an enhancing chest-wall band behind them,
/// background enhancement by BPE grade, and an
/// inserted mass, non-mass or focus lesion on the side of each suspicious exam.
/// Writes <out_dir>/volumes/<patient>_<SEQ>.nii.gz and <out_dir>/manifest.csv.
CohortManifest generate_phantoms(const PhantomOptions& options, const std::filesystem::path& out_dir);

}  // namespace mst
