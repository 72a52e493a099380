#include "pfi/reaction_network.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace pfi {

namespace {

// Cap on a single (p/k)^n weight so subset products of up to ~5 regulators
// stay finite; ratios of capped weights still drive f to its saturation value.
constexpr double kWeightCap = 1e60;

double hill_weight(double level, double k, double n) {
    if (level < 0.0) throw std::invalid_argument("boolode_activation: negative regulator level");
    double w = std::pow(level / k, n);
    return std::min(w, kWeightCap);
}

}  // namespace

double boolode_activation(const RegulatoryGene& gene, const Eigen::VectorXd& protein_levels) {
    const int r = int(gene.regulators.size());
    if (protein_levels.size() != r)
        throw std::invalid_argument("boolode_activation: level count does not match regulators");
    if (gene.truth.size() != std::size_t(1) << r)
        throw std::invalid_argument("boolode_activation: truth table size mismatch");

    Eigen::VectorXd w(r);
    for (int i = 0; i < r; ++i) w[i] = hill_weight(protein_levels[i], gene.hill_k, gene.hill_n);

    // Denominator factorizes over regulators; the numerator keeps only the
    // configurations the rule accepts.
    double num = 0.0, den = 1.0;
    for (int i = 0; i < r; ++i) den *= 1.0 + w[i];
    for (std::size_t mask = 0; mask < gene.truth.size(); ++mask) {
        if (!gene.truth[mask]) continue;
        double prod = 1.0;
        for (int i = 0; i < r; ++i)
            if (mask >> i & 1) prod *= w[i];
        num += prod;
    }
    return num / den;
}

double boolode_activation(const RegulatoryGene& gene, const Eigen::VectorXd& mrna_counts,
                          double volume) {
    if (volume <= 0.0) throw std::invalid_argument("boolode_activation: volume must be positive");
    return boolode_activation(gene,
                              (gene.protein_gain / volume * mrna_counts.array()).matrix().eval());
}

Eigen::VectorXd RegulatoryNetwork::activation(const Eigen::VectorXd& counts,
                                              double volume) const {
    if (counts.size() != dim())
        throw std::invalid_argument("RegulatoryNetwork::activation: state dimension mismatch");
    if (volume <= 0.0)
        throw std::invalid_argument("RegulatoryNetwork::activation: volume must be positive");
    Eigen::VectorXd f(dim());
    for (int g = 0; g < dim(); ++g) {
        const RegulatoryGene& gene = genes[g];
        Eigen::VectorXd levels(int(gene.regulators.size()));
        for (std::size_t r = 0; r < gene.regulators.size(); ++r) {
            // Quasi-steady-state protein of the *regulator* gene.
            const RegulatoryGene& src = genes[gene.regulators[r]];
            levels[int(r)] = src.protein_gain * counts[gene.regulators[r]] / volume;
        }
        f[g] = boolode_activation(gene, levels);
    }
    return f;
}

Eigen::MatrixXd RegulatoryNetwork::signed_adjacency() const {
    Eigen::MatrixXd adj = Eigen::MatrixXd::Zero(dim(), dim());
    for (const RegulatoryGene& gene : genes) {
        for (std::size_t r = 0; r < gene.regulators.size(); ++r) {
            bool up = false, down = false;
            const std::size_t bit = std::size_t(1) << r;
            for (std::size_t mask = 0; mask < gene.truth.size(); ++mask) {
                if (mask & bit) continue;
                if (!gene.truth[mask] && gene.truth[mask | bit]) up = true;
                if (gene.truth[mask] && !gene.truth[mask | bit]) down = true;
            }
            if (up && down)
                throw std::runtime_error("signed_adjacency: regulator " +
                                         species[gene.regulators[r]] + " of " +
                                         species[gene.index] + " is not monotone");
            if (up) adj(gene.index, gene.regulators[r]) = 1.0;
            if (down) adj(gene.index, gene.regulators[r]) = -1.0;
        }
    }
    return adj;
}

ReactionNetwork RegulatoryNetwork::to_reaction_network(double volume) const {
    if (volume <= 0.0)
        throw std::invalid_argument("to_reaction_network: volume must be positive");
    const int d = dim();
    ReactionNetwork net;
    net.name = name;
    net.species = species;
    net.volume = volume;
    net.stoichiometry = Eigen::MatrixXi::Zero(2 * d, d);
    for (int g = 0; g < d; ++g) {
        net.stoichiometry(2 * g, g) = 1;       // transcription
        net.stoichiometry(2 * g + 1, g) = -1;  // degradation
    }
    RegulatoryNetwork model = *this;
    net.propensity = [model, d](const Eigen::VectorXd& x, double V) {
        Eigen::VectorXd f = model.activation(x.cwiseMax(0.0), V);
        Eigen::VectorXd a(2 * d);
        for (int g = 0; g < d; ++g) {
            a[2 * g] = model.genes[g].transcription * V * f[g];
            a[2 * g + 1] = model.genes[g].degradation * std::max(x[g], 0.0);
        }
        return a;
    };
    return net;
}

namespace {

RegulatoryGene make_gene(const std::vector<std::string>& species, int index,
                         const std::string& rule_text) {
    BooleanRule rule = BooleanRule::parse(rule_text, species);
    RegulatoryGene gene;
    gene.index = index;
    gene.regulators = rule.inputs();
    const std::size_t rows = std::size_t(1) << gene.regulators.size();
    gene.truth.resize(rows);
    std::vector<bool> values(species.size(), false);
    for (std::size_t mask = 0; mask < rows; ++mask) {
        for (std::size_t r = 0; r < gene.regulators.size(); ++r)
            values[gene.regulators[r]] = (mask >> r & 1) != 0;
        gene.truth[mask] = rule.eval(values);
    }
    return gene;
}

RegulatoryNetwork make_circuit(std::string name, std::vector<std::string> species,
                               const std::vector<std::string>& rules) {
    RegulatoryNetwork net;
    net.name = std::move(name);
    net.species = std::move(species);
    for (std::size_t g = 0; g < rules.size(); ++g)
        net.genes.push_back(make_gene(net.species, int(g), rules[g]));
    return net;
}

}  // namespace

RegulatoryNetwork mcad_rules() {
    return make_circuit("mcad", {"PAX6", "SP8", "FGF8", "EMX2", "COUPTFI"},
                        {
                            "SP8 ∧ ¬COUPTFI ∧ ¬EMX2",            // PAX6
                            "FGF8 ∧ ¬EMX2",                       // SP8
                            "FGF8 ∧ SP8 ∧ ¬EMX2",                // FGF8
                            "¬FGF8 ∧ ¬PAX6 ∧ ¬SP8 ∧ COUPTFI",  // EMX2
                            "¬SP8 ∧ ¬FGF8",                       // COUPTFI
                        });
}

RegulatoryNetwork hsc_rules() {
    return make_circuit(
        "hsc",
        {"GATA1", "GATA2", "FOG1", "EKLF", "FLI1", "SCL", "CEBPA", "PU1", "CJUN", "EGRNAB",
         "GFI1"},
        {
            "(GATA1 ∨ GATA2 ∨ FLI1) ∧ ¬PU1",  // GATA1
            "GATA2 ∧ ¬(GATA1 ∧ FOG1) ∧ ¬PU1",  // GATA2
            "GATA1",                                // FOG1
            "GATA1 ∧ ¬FLI1",                      // EKLF
            "GATA1 ∧ ¬EKLF",                      // FLI1
            "GATA1 ∧ ¬PU1",                       // SCL
            "CEBPA ∧ ¬(GATA1 ∧ FOG1 ∧ SCL)",   // CEBPA
            "(CEBPA ∨ PU1) ∧ ¬(GATA1 ∨ GATA2)",  // PU1
            "PU1 ∧ ¬GFI1",                        // CJUN
            "(PU1 ∧ CJUN) ∧ ¬GFI1",              // EGRNAB
            "CEBPA ∧ ¬EGRNAB",                    // GFI1
        });
}

ReactionNetwork build_mcad(double volume) {
    ReactionNetwork net = mcad_rules().to_reaction_network(volume);
    net.notes.push_back("mCAD Boolean circuit, 5 genes, transcription 20, degradation 5");
    return net;
}

ReactionNetwork build_hsc(double volume) {
    ReactionNetwork net = hsc_rules().to_reaction_network(volume);
    net.notes.push_back("HSC Boolean circuit, 11 genes, transcription 20, degradation 5");
    return net;
}

ReactionNetwork build_toggle_switch(double volume) {
    if (volume <= 0.0) throw std::invalid_argument("build_toggle_switch: volume must be positive");
    ReactionNetwork net;
    net.name = "toggle";
    net.species = {"x1", "x2"};
    net.volume = volume;
    net.stoichiometry.resize(4, 2);
    net.stoichiometry << 1, 0, -1, 0, 0, 1, 0, -1;
    // Self-activation plus cross-repression, a = b = k = ell = 1, n = 4;
    // rates are intensive so production scales with V.
    net.propensity = [](const Eigen::VectorXd& x, double V) {
        auto hill = [](double u) {
            double u4 = u * u * u * u;
            return u4 / (1.0 + u4);
        };
        double u1 = std::max(x[0], 0.0) / V, u2 = std::max(x[1], 0.0) / V;
        Eigen::VectorXd a(4);
        a[0] = V * (hill(u1) + 1.0 - hill(u2));
        a[1] = std::max(x[0], 0.0);
        a[2] = V * (hill(u2) + 1.0 - hill(u1));
        a[3] = std::max(x[1], 0.0);
        return a;
    };
    net.notes.push_back("mutual-repression toggle switch with Hill exponent 4");
    return net;
}

ReactionNetwork build_cyclic_linear(int d, double volume) {
    if (d < 2) throw std::invalid_argument("build_cyclic_linear: need at least 2 species");
    if (volume <= 0.0) throw std::invalid_argument("build_cyclic_linear: volume must be positive");
    ReactionNetwork net;
    net.name = "cyclic" + std::to_string(d);
    net.volume = volume;
    net.stoichiometry = Eigen::MatrixXi::Zero(d, d);
    Eigen::VectorXd rates(d);
    for (int i = 0; i < d; ++i) {
        net.species.push_back("X" + std::to_string(i + 1));
        net.stoichiometry(i, i) = -1;
        net.stoichiometry(i, (i + 1) % d) = 1;
        // Conversion rates log-spaced over [10^0.1, 10^1.5], scaled by 0.1.
        rates[i] = 0.1 * std::pow(10.0, 0.1 + 1.4 * i / (d - 1));
    }
    net.propensity = [rates](const Eigen::VectorXd& x, double) {
        return (rates.array() * x.array().max(0.0)).matrix().eval();
    };
    net.notes.push_back("conversion chain with cyclic closure X" + std::to_string(d) + " -> X1");
    return net;
}

namespace {

RegulatoryNetwork regulatory_from_json(const nlohmann::json& doc) {
    RegulatoryNetwork net;
    net.name = doc.value("name", "regulatory");
    net.species = doc.at("species").get<std::vector<std::string>>();
    std::vector<RegulatoryGene> genes(net.species.size());
    std::vector<bool> seen(net.species.size(), false);
    for (const auto& g : doc.at("genes")) {
        const std::string target = g.at("target").get<std::string>();
        auto it = std::find(net.species.begin(), net.species.end(), target);
        if (it == net.species.end())
            throw std::invalid_argument("load_network: unknown target gene " + target);
        int idx = int(it - net.species.begin());
        RegulatoryGene gene = make_gene(net.species, idx, g.at("rule").get<std::string>());
        gene.hill_k = g.value("hill_k", gene.hill_k);
        gene.hill_n = g.value("hill_n", gene.hill_n);
        gene.transcription = g.value("transcription", gene.transcription);
        gene.degradation = g.value("degradation", gene.degradation);
        gene.protein_gain = g.value("protein_gain", gene.protein_gain);
        genes[idx] = gene;
        seen[idx] = true;
    }
    for (std::size_t i = 0; i < seen.size(); ++i)
        if (!seen[i])
            throw std::invalid_argument("load_network: no rule for species " + net.species[i]);
    net.genes = std::move(genes);
    return net;
}

ReactionNetwork mass_action_from_json(const nlohmann::json& doc) {
    ReactionNetwork net;
    net.name = doc.value("name", "mass_action");
    net.species = doc.at("species").get<std::vector<std::string>>();
    net.volume = doc.value("volume", 1.0);
    const int d = int(net.species.size());
    const auto& reactions = doc.at("reactions");
    const int R = int(reactions.size());
    net.stoichiometry = Eigen::MatrixXi::Zero(R, d);
    Eigen::MatrixXd orders = Eigen::MatrixXd::Zero(R, d);
    Eigen::VectorXd rates(R);
    for (int r = 0; r < R; ++r) {
        const auto& rx = reactions.at(r);
        auto stoich = rx.at("stoich").get<std::vector<int>>();
        auto ord = rx.at("orders").get<std::vector<int>>();
        if (int(stoich.size()) != d || int(ord.size()) != d)
            throw std::invalid_argument("load_network: reaction row length mismatch");
        for (int j = 0; j < d; ++j) {
            net.stoichiometry(r, j) = stoich[j];
            orders(r, j) = ord[j];
        }
        rates[r] = rx.at("rate").get<double>();
    }
    net.propensity = [rates, orders](const Eigen::VectorXd& x, double) {
        Eigen::VectorXd a = rates;
        for (int r = 0; r < a.size(); ++r)
            for (int j = 0; j < x.size(); ++j)
                if (orders(r, j) > 0.0) a[r] *= std::pow(std::max(x[j], 0.0), orders(r, j));
        return a;
    };
    return net;
}

}  // namespace

ReactionNetwork load_network(const std::string& json_text) {
    nlohmann::json doc = nlohmann::json::parse(json_text);
    const std::string kind = doc.at("kind").get<std::string>();
    if (kind == "mass_action") return mass_action_from_json(doc);
    if (kind == "regulatory")
        return regulatory_from_json(doc).to_reaction_network(doc.value("volume", 1.0));
    throw std::invalid_argument("load_network: unknown kind \"" + kind + "\"");
}

ReactionNetwork load_network_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_network_file: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return load_network(buf.str());
}

RegulatoryNetwork load_regulatory_network(const std::string& json_text) {
    nlohmann::json doc = nlohmann::json::parse(json_text);
    if (doc.at("kind").get<std::string>() != "regulatory")
        throw std::invalid_argument("load_regulatory_network: kind must be \"regulatory\"");
    return regulatory_from_json(doc);
}

}  // namespace pfi
