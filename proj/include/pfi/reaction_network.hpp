#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace pfi {

/// Boolean expression over named inputs, parsed from text using the
/// connectives ∧ ∨ ¬ (ASCII & | ! accepted too) and parentheses.
/// ¬ binds tightest, then ∧, then ∨.
class BooleanRule {
public:
    static BooleanRule parse(const std::string& text, const std::vector<std::string>& names);

    bool eval(const std::vector<bool>& values) const;

    /// Indices of names actually referenced, sorted and deduplicated.
    const std::vector<int>& inputs() const { return inputs_; }
    const std::string& text() const { return text_; }

private:
    struct Node {
        enum class Kind { var, neg, conj, disj } kind;
        int a = -1, b = -1;  // children, or variable index for var nodes
    };
    std::vector<Node> nodes_;
    int root_ = -1;
    std::vector<int> inputs_;
    std::string text_;
    friend class RuleParser;
};

/// One gene of the Boolean-rule regulatory model. The truth table has
/// 2^|regulators| entries; bit r of the row index means regulator r is bound.
/// protein_gain is the quasi-steady-state protein/mRNA ratio applied before
/// the Hill threshold when activation is evaluated from mRNA counts.
struct RegulatoryGene {
    int index = -1;
    std::vector<int> regulators;
    std::vector<bool> truth;
    double hill_k = 10.0;
    double hill_n = 10.0;
    double transcription = 20.0;
    double degradation = 5.0;
    double protein_gain = 10.0;
};

/// Fractional activation f in [0, 1]: sum over bound-regulator configurations
/// S of alpha_S Pr(S), with Pr(S) the equilibrium weight prod (p/k)^n over the
/// normalizing sum of all configurations. protein_levels are the regulators'
/// protein concentrations, aligned with gene.regulators.
double boolode_activation(const RegulatoryGene& gene, const Eigen::VectorXd& protein_levels);

/// Same, but from raw mRNA counts at reaction volume V: the protein level of
/// regulator r is protein_gain * counts[r] / V.
double boolode_activation(const RegulatoryGene& gene, const Eigen::VectorXd& mrna_counts,
                          double volume);

/// General reaction system: R reactions over d species. Propensities take the
/// current counts and the volume and return R nonnegative rates (1/time).
struct ReactionNetwork {
    std::string name;
    std::vector<std::string> species;
    Eigen::MatrixXi stoichiometry;  // R x d, net count change per firing
    std::function<Eigen::VectorXd(const Eigen::VectorXd&, double)> propensity;
    double volume = 1.0;
    std::vector<std::string> notes;

    int dim() const { return int(stoichiometry.cols()); }
    int reactions() const { return int(stoichiometry.rows()); }
    Eigen::VectorXd rates(const Eigen::VectorXd& counts) const {
        return propensity(counts, volume);
    }
};

/// Boolean-rule gene circuit; every gene has a production and a degradation
/// reaction per the transcription model.
struct RegulatoryNetwork {
    std::string name;
    std::vector<std::string> species;
    std::vector<RegulatoryGene> genes;

    int dim() const { return int(genes.size()); }

    /// Per-gene activations f_i at the given counts and volume.
    Eigen::VectorXd activation(const Eigen::VectorXd& counts, double volume) const;

    /// Signed regulator -> target adjacency A(target, regulator):
    /// +1 activator, -1 repressor, 0 no influence. Mixed influence is
    /// rejected; the circuits used here have none.
    Eigen::MatrixXd signed_adjacency() const;

    /// 2d-reaction network: production at m V f_i, degradation at l x_i.
    ReactionNetwork to_reaction_network(double volume) const;
};

ReactionNetwork build_toggle_switch(double volume = 1.0);
ReactionNetwork build_mcad(double volume = 4.0);
ReactionNetwork build_hsc(double volume = 4.0);
ReactionNetwork build_cyclic_linear(int d = 30, double volume = 4.0);

/// The underlying gene circuits (rule access for ground-truth analysis).
RegulatoryNetwork mcad_rules();
RegulatoryNetwork hsc_rules();

/// Network from a JSON description. kind "mass_action" lists reactions with
/// stoichiometry rows, a rate constant, and reactant orders; kind
/// "regulatory" lists genes with Boolean rule strings over the species names.
ReactionNetwork load_network(const std::string& json_text);
ReactionNetwork load_network_file(const std::string& path);
RegulatoryNetwork load_regulatory_network(const std::string& json_text);

}  // namespace pfi
