#include "pfi/dataset.hpp"

#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "pfi/rng.hpp"

namespace pfi {

std::string to_string(SpaceTag tag) {
    return tag == SpaceTag::counts ? "counts" : "concentration";
}

SpaceTag space_tag_from_string(const std::string& s) {
    if (s == "counts") return SpaceTag::counts;
    if (s == "concentration") return SpaceTag::concentration;
    throw std::invalid_argument("space_tag_from_string: unknown tag \"" + s + "\"");
}

SnapshotDataset SnapshotDataset::to_concentration() const {
    SnapshotDataset out = *this;
    if (space == SpaceTag::concentration) return out;
    if (volume <= 0.0) throw std::runtime_error("to_concentration: volume must be positive");
    for (auto& snap : out.snapshots) snap /= volume;
    out.space = SpaceTag::concentration;
    return out;
}

std::uint64_t SnapshotDataset::content_hash() const {
    std::uint64_t h = hash_string(network);
    for (const auto& name : species) {
        h = hash_bytes(name.data(), name.size(), h);
        h = mix64(h ^ 0x7c);  // separator so {"ab","c"} differs from {"a","bc"}
    }
    const char tag = space == SpaceTag::counts ? 'c' : 'x';
    h = hash_bytes(&tag, 1, h);
    h = hash_bytes(&volume, sizeof volume, h);
    h = hash_bytes(&seed, sizeof seed, h);
    h = hash_bytes(times.data(), sizeof(double) * times.size(), h);
    for (const auto& snap : snapshots) {
        const std::int64_t shape[2] = {snap.rows(), snap.cols()};
        h = hash_bytes(shape, sizeof shape, h);
        h = hash_bytes(snap.data(), sizeof(double) * snap.size(), h);
    }
    return h;
}

void save_dataset(const SnapshotDataset& ds, const std::string& path_stem) {
    if (int(ds.snapshots.size()) != ds.times.size())
        throw std::invalid_argument("save_dataset: times/snapshots length mismatch");

    std::ofstream csv(path_stem + ".csv");
    if (!csv) throw std::runtime_error("save_dataset: cannot write " + path_stem + ".csv");
    csv << std::setprecision(std::numeric_limits<double>::max_digits10);
    csv << "t_index,time";
    for (const auto& name : ds.species) csv << ',' << name;
    csv << '\n';
    for (std::size_t k = 0; k < ds.snapshots.size(); ++k) {
        const Eigen::MatrixXd& snap = ds.snapshots[k];
        if (snap.cols() != ds.dim())
            throw std::invalid_argument("save_dataset: snapshot column count mismatch");
        for (int j = 0; j < snap.rows(); ++j) {
            csv << k << ',' << ds.times[int(k)];
            for (int c = 0; c < snap.cols(); ++c) csv << ',' << snap(j, c);
            csv << '\n';
        }
    }
    if (!csv.flush()) throw std::runtime_error("save_dataset: write failed for " + path_stem);

    nlohmann::json meta;
    meta["network"] = ds.network;
    meta["species"] = ds.species;
    meta["seed"] = ds.seed;
    meta["volume"] = ds.volume;
    meta["space"] = to_string(ds.space);
    std::ofstream side(path_stem + ".json");
    if (!side) throw std::runtime_error("save_dataset: cannot write " + path_stem + ".json");
    side << meta.dump(2) << '\n';
}

SnapshotDataset load_dataset(const std::string& path_stem) {
    std::ifstream side(path_stem + ".json");
    if (!side) throw std::runtime_error("load_dataset: cannot open " + path_stem + ".json");
    nlohmann::json meta = nlohmann::json::parse(side);

    SnapshotDataset ds;
    ds.network = meta.at("network").get<std::string>();
    ds.species = meta.at("species").get<std::vector<std::string>>();
    ds.seed = meta.at("seed").get<std::uint64_t>();
    ds.volume = meta.at("volume").get<double>();
    ds.space = space_tag_from_string(meta.at("space").get<std::string>());

    std::ifstream csv(path_stem + ".csv");
    if (!csv) throw std::runtime_error("load_dataset: cannot open " + path_stem + ".csv");
    std::string line;
    if (!std::getline(csv, line)) throw std::runtime_error("load_dataset: empty CSV");
    {
        std::string expect = "t_index,time";
        for (const auto& name : ds.species) expect += "," + name;
        if (line != expect)
            throw std::runtime_error("load_dataset: CSV header does not match the sidecar");
    }

    std::vector<double> times;
    std::vector<std::vector<Eigen::VectorXd>> rows;  // grouped by t_index
    const int d = ds.dim();
    for (int lineno = 2; std::getline(csv, line); ++lineno) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string field;
        std::vector<double> vals;
        while (std::getline(ss, field, ',')) vals.push_back(std::stod(field));
        if (int(vals.size()) != d + 2)
            throw std::runtime_error("load_dataset: bad field count at line " +
                                     std::to_string(lineno));
        const int k = int(vals[0]);
        if (k < 0 || k > int(rows.size()))
            throw std::runtime_error("load_dataset: t_index out of order at line " +
                                     std::to_string(lineno));
        if (k == int(rows.size())) {
            rows.emplace_back();
            times.push_back(vals[1]);
        } else if (vals[1] != times[k]) {
            throw std::runtime_error("load_dataset: inconsistent time for t_index " +
                                     std::to_string(k));
        }
        rows[k].push_back(Eigen::Map<Eigen::VectorXd>(vals.data() + 2, d));
    }
    if (rows.empty()) throw std::runtime_error("load_dataset: CSV has no samples");

    ds.times = Eigen::Map<Eigen::VectorXd>(times.data(), int(times.size()));
    for (const auto& group : rows) {
        Eigen::MatrixXd snap(int(group.size()), d);
        for (std::size_t j = 0; j < group.size(); ++j) snap.row(int(j)) = group[j];
        ds.snapshots.push_back(std::move(snap));
    }
    return ds;
}

}  // namespace pfi
