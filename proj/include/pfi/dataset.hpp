#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace pfi {

enum class SpaceTag { counts, concentration };

std::string to_string(SpaceTag tag);
SpaceTag space_tag_from_string(const std::string& s);

/// Cross-sectional snapshot data: snapshots[k] holds n_k rows of d-dimensional
/// states observed at times[k]. Samples across snapshots are unpaired.
struct SnapshotDataset {
    std::string network;
    std::vector<std::string> species;
    Eigen::VectorXd times;
    std::vector<Eigen::MatrixXd> snapshots;
    SpaceTag space = SpaceTag::counts;
    double volume = 1.0;
    std::uint64_t seed = 0;

    int dim() const { return species.empty() ? 0 : int(species.size()); }
    int snapshot_count() const { return int(snapshots.size()); }

    /// Dataset in concentration units (counts / volume). No-op if already
    /// concentration.
    SnapshotDataset to_concentration() const;

    /// Order-insensitive only in formatting: hashes the exact numeric content,
    /// times, species and space tag. Used to detect dataset/model mismatches.
    std::uint64_t content_hash() const;
};

/// Writes `<path>.csv` with header t_index,time,<species...> (one row per
/// sample) and `<path>.json` with the generation metadata.
void save_dataset(const SnapshotDataset& ds, const std::string& path_stem);

SnapshotDataset load_dataset(const std::string& path_stem);

}  // namespace pfi
