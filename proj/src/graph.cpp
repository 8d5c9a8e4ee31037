#include "cgc/graph.hpp"

#include "cgc/io.hpp"

#include <algorithm>
#include <deque>
#include <functional>

namespace cgc {

namespace {

std::optional<std::vector<std::size_t>> topo_sort(std::size_t n,
                                                  const std::vector<std::vector<std::size_t>>& children) {
    std::vector<std::size_t> indegree(n, 0);
    for (const auto& ch : children) {
        for (auto c : ch) {
            ++indegree[c];
        }
    }
    // Smallest declaration index first keeps the order deterministic.
    std::set<std::size_t> ready;
    for (std::size_t i = 0; i < n; ++i) {
        if (indegree[i] == 0) {
            ready.insert(i);
        }
    }
    std::vector<std::size_t> order;
    order.reserve(n);
    while (!ready.empty()) {
        auto v = *ready.begin();
        ready.erase(ready.begin());
        order.push_back(v);
        for (auto c : children[v]) {
            if (--indegree[c] == 0) {
                ready.insert(c);
            }
        }
    }
    if (order.size() != n) {
        return std::nullopt;
    }
    return order;
}

std::vector<std::string> in_declaration_order(const CausalGraph& g, const NameSet& names) {
    std::vector<std::string> out;
    for (const auto& n : g.nodes()) {
        if (names.count(n)) {
            out.push_back(n);
        }
    }
    return out;
}

} // namespace

CausalGraph::CausalGraph(std::vector<std::string> nodes, EdgeSet edges, std::string treatment,
                         std::string outcome)
    : nodes_(std::move(nodes)), edges_(std::move(edges)), treatment_(std::move(treatment)),
      outcome_(std::move(outcome)) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].empty()) {
            throw GraphError("empty node name at position " + std::to_string(i));
        }
        if (!index_.emplace(nodes_[i], i).second) {
            throw GraphError("duplicate node '" + nodes_[i] + "'");
        }
    }
    if (!has_node(treatment_)) {
        throw GraphError("treatment '" + treatment_ + "' is not a declared node");
    }
    if (!has_node(outcome_)) {
        throw GraphError("outcome '" + outcome_ + "' is not a declared node");
    }
    if (treatment_ == outcome_) {
        throw GraphError("treatment and outcome are the same node '" + treatment_ + "'");
    }
    std::vector<std::vector<std::size_t>> children(nodes_.size());
    for (const auto& [p, c] : edges_) {
        if (!has_node(p)) {
            throw GraphError("edge " + p + " -> " + c + " references undeclared node '" + p + "'");
        }
        if (!has_node(c)) {
            throw GraphError("edge " + p + " -> " + c + " references undeclared node '" + c + "'");
        }
        if (p == c) {
            throw GraphError("self-loop on '" + p + "'");
        }
        children[index_.at(p)].push_back(index_.at(c));
    }
    if (!topo_sort(nodes_.size(), children)) {
        throw GraphError("graph contains a directed cycle");
    }
}

std::size_t CausalGraph::index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw GraphError("unknown node '" + name + "'");
    }
    return it->second;
}

std::vector<std::string> CausalGraph::parents(const std::string& node) const {
    index_of(node);
    NameSet ps;
    for (const auto& [p, c] : edges_) {
        if (c == node) {
            ps.insert(p);
        }
    }
    return in_declaration_order(*this, ps);
}

std::vector<std::string> CausalGraph::children(const std::string& node) const {
    index_of(node);
    NameSet cs;
    for (const auto& [p, c] : edges_) {
        if (p == node) {
            cs.insert(c);
        }
    }
    return in_declaration_order(*this, cs);
}

std::vector<std::string> CausalGraph::covariates() const {
    std::vector<std::string> out;
    for (const auto& n : nodes_) {
        if (n != treatment_ && n != outcome_) {
            out.push_back(n);
        }
    }
    return out;
}

std::vector<std::string> CausalGraph::topological_order() const {
    std::vector<std::vector<std::size_t>> children(nodes_.size());
    for (const auto& [p, c] : edges_) {
        children[index_.at(p)].push_back(index_.at(c));
    }
    const auto order = topo_sort(nodes_.size(), children);
    std::vector<std::string> out;
    for (auto i : *order) {
        out.push_back(nodes_[i]);
    }
    return out;
}

std::vector<std::vector<Index>> VariableGrouping::column_indices(std::span<const std::string> columns) const {
    std::vector<std::vector<Index>> out;
    out.reserve(groups.size());
    for (const auto& group : groups) {
        std::vector<Index> idx;
        for (const auto& name : group) {
            auto it = std::find(columns.begin(), columns.end(), name);
            if (it == columns.end()) {
                throw GraphError("group member '" + name + "' is not a data column");
            }
            idx.push_back(static_cast<Index>(it - columns.begin()));
        }
        out.push_back(std::move(idx));
    }
    return out;
}

VariableGrouping fully_connected(std::vector<std::string> covariates) {
    VariableGrouping g;
    g.groups.push_back(covariates);
    g.covariates = std::move(covariates);
    return g;
}

NameSet ancestors(const CausalGraph& g, const std::string& node) {
    g.index_of(node);
    std::map<std::string, std::vector<std::string>> parents;
    for (const auto& [p, c] : g.edges()) {
        parents[c].push_back(p);
    }
    NameSet seen;
    std::deque<std::string> frontier{node};
    while (!frontier.empty()) {
        auto cur = frontier.front();
        frontier.pop_front();
        for (const auto& p : parents[cur]) {
            if (seen.insert(p).second) {
                frontier.push_back(p);
            }
        }
    }
    return seen;
}

VariableGrouping build_groups(const CausalGraph& g) {
    const auto& t = g.treatment();
    std::vector<std::string> parent_covs;
    for (const auto& p : g.parents(g.outcome())) {
        if (p != t) {
            parent_covs.push_back(p);
        }
    }
    if (parent_covs.empty()) {
        throw DegenerateGroupingError("outcome '" + g.outcome() +
                                      "' has no parent other than the treatment; no covariate "
                                      "information reaches it");
    }

    std::vector<NameSet> candidates;
    candidates.emplace_back(parent_covs.begin(), parent_covs.end());
    for (const auto& x : parent_covs) {
        auto members = ancestors(g, x);
        members.insert(x);
        members.erase(t);
        candidates.push_back(std::move(members));
    }

    VariableGrouping out;
    out.covariates = g.covariates();
    std::vector<NameSet> kept;
    for (auto& c : candidates) {
        if (c.empty() || std::find(kept.begin(), kept.end(), c) != kept.end()) {
            continue;
        }
        kept.push_back(c);
    }
    NameSet covered;
    for (const auto& c : kept) {
        covered.insert(c.begin(), c.end());
        out.groups.push_back(in_declaration_order(g, c));
    }
    std::vector<std::string> leftover;
    for (const auto& c : out.covariates) {
        if (!covered.count(c)) {
            leftover.push_back(c);
        }
    }
    if (!leftover.empty()) {
        out.groups.push_back(std::move(leftover));
    }
    return out;
}

VariableGrouping groups_from_forbidden(const std::vector<std::string>& covariates,
                                       const std::set<std::pair<std::string, std::string>>& forbidden) {
    const auto n = covariates.size();
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < n; ++i) {
        pos[covariates[i]] = i;
    }
    // Compatibility graph: an edge between every pair that is not forbidden.
    std::vector<std::vector<bool>> compatible(n, std::vector<bool>(n, true));
    for (const auto& [a, b] : forbidden) {
        auto ia = pos.find(a);
        auto ib = pos.find(b);
        if (ia == pos.end() || ib == pos.end()) {
            throw GraphError("forbidden pair (" + a + ", " + b + ") references an undeclared covariate");
        }
        compatible[ia->second][ib->second] = false;
        compatible[ib->second][ia->second] = false;
    }

    std::vector<std::vector<std::size_t>> cliques;
    // Bron-Kerbosch with pivoting over index sets.
    std::function<void(std::vector<std::size_t>, std::vector<std::size_t>, std::vector<std::size_t>)> expand =
        [&](std::vector<std::size_t> r, std::vector<std::size_t> p, std::vector<std::size_t> x) {
            if (p.empty() && x.empty()) {
                std::sort(r.begin(), r.end());
                cliques.push_back(std::move(r));
                return;
            }
            std::size_t pivot = p.empty() ? x.front() : p.front();
            std::size_t best = 0;
            for (auto cand : p) {
                std::size_t deg = 0;
                for (auto q : p) {
                    deg += (q != cand && compatible[cand][q]) ? 1 : 0;
                }
                if (deg >= best) {
                    best = deg;
                    pivot = cand;
                }
            }
            auto todo = p;
            for (auto v : todo) {
                if (v != pivot && compatible[pivot][v]) {
                    continue;
                }
                std::vector<std::size_t> np, nx;
                for (auto q : p) {
                    if (q != v && compatible[v][q]) {
                        np.push_back(q);
                    }
                }
                for (auto q : x) {
                    if (q != v && compatible[v][q]) {
                        nx.push_back(q);
                    }
                }
                auto nr = r;
                nr.push_back(v);
                expand(std::move(nr), std::move(np), std::move(nx));
                p.erase(std::find(p.begin(), p.end(), v));
                x.push_back(v);
            }
        };
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) {
        all[i] = i;
    }
    if (n > 0) {
        expand({}, all, {});
    }
    std::sort(cliques.begin(), cliques.end());

    VariableGrouping out;
    out.covariates = covariates;
    for (const auto& c : cliques) {
        std::vector<std::string> names;
        for (auto i : c) {
            names.push_back(covariates[i]);
        }
        out.groups.push_back(std::move(names));
    }
    return out;
}

CausalGraph normalize_discovered(std::vector<std::string> nodes, const EdgeSet& edges, std::string treatment,
                                 std::string outcome) {
    EdgeSet out;
    for (const auto& [p, c] : edges) {
        if (p == outcome) {
            out.emplace(c, p);
        } else {
            out.emplace(p, c);
        }
    }
    try {
        return CausalGraph(std::move(nodes), std::move(out), std::move(treatment), std::move(outcome));
    } catch (const GraphError& e) {
        throw GraphError(std::string("reorienting edges into the outcome leaves an invalid graph: ") + e.what());
    }
}

CausalGraph normalize_discovered(const CausalGraph& g) {
    return normalize_discovered(g.nodes(), g.edges(), g.treatment(), g.outcome());
}

CausalGraph mode_graph(std::span<const CausalGraph> graphs) {
    if (graphs.empty()) {
        throw GraphError("mode_graph needs at least one graph");
    }
    std::map<EdgeSet, std::pair<std::size_t, std::size_t>> counts; // edges -> (count, first index)
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        if (graphs[i].nodes() != graphs.front().nodes()) {
            throw GraphError("mode_graph inputs have different node sets");
        }
        auto [it, inserted] = counts.try_emplace(graphs[i].edges(), 0, i);
        ++it->second.first;
    }
    auto better = [](const auto& a, const auto& b) {
        // a beats b?
        if (a.second.first != b.second.first) {
            return a.second.first > b.second.first;
        }
        if (a.first.size() != b.first.size()) {
            return a.first.size() < b.first.size();
        }
        return a.first < b.first;
    };
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it) {
        if (better(*it, *best)) {
            best = it;
        }
    }
    return graphs[best->second.second];
}

std::string to_text(const CausalGraph& g) {
    std::string out = "#nodes ";
    for (std::size_t i = 0; i < g.nodes().size(); ++i) {
        out += (i ? "," : "") + g.nodes()[i];
    }
    out += "\n#treatment " + g.treatment() + "\n#outcome " + g.outcome() + "\n";
    for (const auto& [p, c] : g.edges()) {
        out += p + " -> " + c + "\n";
    }
    return out;
}

CausalGraph graph_from_text(const std::string& text) {
    std::optional<std::vector<std::string>> nodes;
    std::optional<std::string> treatment, outcome;
    EdgeSet edges;
    std::vector<std::string> edge_nodes;
    std::size_t line_no = 0;
    for (const auto& raw : io::split(text, '\n')) {
        ++line_no;
        auto line = io::trim(raw);
        if (line.empty()) {
            continue;
        }
        auto where = "graph line " + std::to_string(line_no);
        if (line.front() == '#') {
            auto sp = line.find(' ');
            auto key = line.substr(0, sp);
            auto value = sp == std::string_view::npos ? std::string_view{} : io::trim(line.substr(sp + 1));
            if (key == "#nodes") {
                nodes.emplace();
                for (const auto& n : io::split(value, ',')) {
                    auto name = io::trim(n);
                    if (!name.empty()) {
                        nodes->emplace_back(name);
                    }
                }
            } else if (key == "#treatment") {
                treatment = std::string(value);
            } else if (key == "#outcome") {
                outcome = std::string(value);
            } else {
                throw GraphError(where + ": unknown header '" + std::string(key) + "'");
            }
            continue;
        }
        auto arrow = line.find("->");
        if (arrow == std::string_view::npos) {
            throw GraphError(where + ": expected 'parent -> child'");
        }
        auto p = std::string(io::trim(line.substr(0, arrow)));
        auto c = std::string(io::trim(line.substr(arrow + 2)));
        if (p.empty() || c.empty()) {
            throw GraphError(where + ": empty endpoint");
        }
        for (const auto& n : {p, c}) {
            if (std::find(edge_nodes.begin(), edge_nodes.end(), n) == edge_nodes.end()) {
                edge_nodes.push_back(n);
            }
        }
        edges.emplace(std::move(p), std::move(c));
    }
    if (!treatment || !outcome) {
        throw GraphError("graph text lacks a #treatment or #outcome header");
    }
    if (!nodes) {
        nodes = edge_nodes;
        for (const auto& n : {*treatment, *outcome}) {
            if (std::find(nodes->begin(), nodes->end(), n) == nodes->end()) {
                nodes->push_back(n);
            }
        }
    }
    return CausalGraph(std::move(*nodes), std::move(edges), std::move(*treatment), std::move(*outcome));
}

CausalGraph read_graph(const std::string& path) {
    return graph_from_text(io::read_file(path));
}

void write_graph(const CausalGraph& g, const std::string& path) {
    io::write_file_atomic(path, to_text(g));
}

} // namespace cgc
