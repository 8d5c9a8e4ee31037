#pragma once

#include "cgc/types.hpp"

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cgc {

using Edge = std::pair<std::string, std::string>;
using EdgeSet = std::set<Edge>;
using NameSet = std::set<std::string>;

/// Named DAG with a designated treatment and outcome node.
///
/// Immutable after construction; the constructor rejects undeclared edge
/// endpoints, self-loops, cycles and a treatment equal to the outcome.
class CausalGraph {
public:
    CausalGraph(std::vector<std::string> nodes, EdgeSet edges, std::string treatment,
                std::string outcome);

    const std::vector<std::string>& nodes() const { return nodes_; }
    const EdgeSet& edges() const { return edges_; }
    const std::string& treatment() const { return treatment_; }
    const std::string& outcome() const { return outcome_; }

    bool has_node(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t index_of(const std::string& name) const;

    /// Parents of `node` in declaration order.
    std::vector<std::string> parents(const std::string& node) const;
    std::vector<std::string> children(const std::string& node) const;

    /// Every node except the treatment and the outcome, in declaration order.
    std::vector<std::string> covariates() const;

    /// A topological order of the nodes; ties resolved by declaration order.
    std::vector<std::string> topological_order() const;

    friend bool operator==(const CausalGraph& a, const CausalGraph& b) {
        return a.nodes_ == b.nodes_ && a.edges_ == b.edges_ && a.treatment_ == b.treatment_ &&
               a.outcome_ == b.outcome_;
    }

private:
    std::vector<std::string> nodes_;
    EdgeSet edges_;
    std::string treatment_;
    std::string outcome_;
    std::map<std::string, std::size_t> index_;
};

/// Ordered covariate groups that are allowed to interact.
struct VariableGrouping {
    std::vector<std::vector<std::string>> groups;
    std::vector<std::string> covariates;

    /// Column indices of each group within `columns`.
    std::vector<std::vector<Index>> column_indices(std::span<const std::string> columns) const;

    friend bool operator==(const VariableGrouping&, const VariableGrouping&) = default;
};

/// Single group holding every covariate; imposes no constraint.
VariableGrouping fully_connected(std::vector<std::string> covariates);

/// All nodes with a directed path into `node`, excluding `node` itself.
NameSet ancestors(const CausalGraph& g, const std::string& node);

/// Raised when no covariate information reaches the outcome.
class DegenerateGroupingError : public GraphError {
public:
    using GraphError::GraphError;
};

/// Groups are Pa(Y)\{T} first, then ({x} ∪ An(x))\{T} for each covariate
/// parent x of the outcome in declaration order, empty and set-equal
/// duplicates removed. Covariates left uncovered form one trailing group.
VariableGrouping build_groups(const CausalGraph& g);

/// Maximal covariate subsets containing no forbidden pair.
VariableGrouping groups_from_forbidden(const std::vector<std::string>& covariates,
                                       const std::set<std::pair<std::string, std::string>>& forbidden);

/// Points every edge incident to the outcome into the outcome.
CausalGraph normalize_discovered(const CausalGraph& g);

/// Same as above for a raw edge list that has not been validated yet; throws
/// GraphError if the reoriented edges still contain a cycle.
CausalGraph normalize_discovered(std::vector<std::string> nodes, const EdgeSet& edges,
                                 std::string treatment, std::string outcome);

/// The graph whose edge set occurs most often. Ties prefer fewer edges, then
/// the lexicographically smallest edge list.
CausalGraph mode_graph(std::span<const CausalGraph> graphs);

// Text format: `#nodes a,b,c`, `#treatment t`, `#outcome y` headers followed
// by one `parent -> child` line per edge in sorted order.
std::string to_text(const CausalGraph& g);
CausalGraph graph_from_text(const std::string& text);
CausalGraph read_graph(const std::string& path);
void write_graph(const CausalGraph& g, const std::string& path);

} // namespace cgc
