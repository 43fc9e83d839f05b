#pragma once

// Areal adjacency graphs, iCAR structure matrices and domain partitions.

#include <Eigen/Sparse>

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmpart/errors.hpp"

namespace mmpart {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// Undirected binary adjacency over I areas. Edges are stored once, with
/// first < second, and sorted.
class AreaGraph {
 public:
  AreaGraph() = default;

  AreaGraph(std::vector<std::string> labels,
            std::vector<std::pair<std::size_t, std::size_t>> edges)
      : labels_(std::move(labels)) {
    const std::size_t n = labels_.size();
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (auto [a, b] : edges) {
      if (a >= n || b >= n) throw DataError("edge index out of range");
      if (a == b) throw DataError("self-loop on area '" + labels_[a] + "'");
      if (a > b) std::swap(a, b);
      if (!seen.insert({a, b}).second) {
        throw DataError("duplicate edge " + labels_[a] + " - " + labels_[b]);
      }
    }
    edges_.assign(seen.begin(), seen.end());
    neighbours_.assign(n, {});
    for (auto [a, b] : edges_) {
      neighbours_[a].push_back(b);
      neighbours_[b].push_back(a);
    }
    for (auto& nb : neighbours_) std::sort(nb.begin(), nb.end());
  }

  std::size_t n_areas() const { return labels_.size(); }
  const std::vector<std::string>& labels() const { return labels_; }
  const std::vector<std::pair<std::size_t, std::size_t>>& edges() const {
    return edges_;
  }
  const std::vector<std::size_t>& neighbours(std::size_t i) const {
    return neighbours_[i];
  }
  std::size_t degree(std::size_t i) const { return neighbours_[i].size(); }

 private:
  std::vector<std::string> labels_;
  std::vector<std::pair<std::size_t, std::size_t>> edges_;
  std::vector<std::vector<std::size_t>> neighbours_;
};

/// Builds a graph from labelled edges. Indices follow the order of `labels`.
inline AreaGraph build_graph(
    const std::vector<std::pair<std::string, std::string>>& edge_list,
    const std::vector<std::string>& labels) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!index.emplace(labels[i], i).second) {
      throw DataError("duplicate label '" + labels[i] + "'");
    }
  }
  auto lookup = [&](const std::string& s) {
    auto it = index.find(s);
    if (it == index.end()) throw DataError("unknown label '" + s + "'");
    return it->second;
  };
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  edges.reserve(edge_list.size());
  for (const auto& [a, b] : edge_list) {
    if (a == b) throw DataError("self-loop on area '" + a + "'");
    edges.emplace_back(lookup(a), lookup(b));
  }
  return AreaGraph(labels, std::move(edges));
}

/// Rook-adjacency lattice with row-major indices and labels "r<row>c<col>".
inline AreaGraph lattice_graph(std::size_t rows, std::size_t cols) {
  std::vector<std::string> labels;
  labels.reserve(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      labels.push_back("r" + std::to_string(r) + "c" + std::to_string(c));
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      if (c + 1 < cols) edges.emplace_back(i, i + 1);
      if (r + 1 < rows) edges.emplace_back(i, i + cols);
    }
  }
  return AreaGraph(std::move(labels), std::move(edges));
}

/// Connected components, each sorted ascending, ordered by smallest member.
inline std::vector<std::vector<std::size_t>> connected_components(
    const AreaGraph& g) {
  const std::size_t n = g.n_areas();
  std::vector<int> seen(n, 0);
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < n; ++s) {
    if (seen[s]) continue;
    std::vector<std::size_t> comp;
    stack.assign(1, s);
    seen[s] = 1;
    while (!stack.empty()) {
      std::size_t v = stack.back();
      stack.pop_back();
      comp.push_back(v);
      for (std::size_t w : g.neighbours(v)) {
        if (!seen[w]) {
          seen[w] = 1;
          stack.push_back(w);
        }
      }
    }
    std::sort(comp.begin(), comp.end());
    out.push_back(std::move(comp));
  }
  return out;
}

/// Q = D_w - W together with its rank deficiency.
struct StructureMatrix {
  SparseMatrix q;
  std::size_t n_components = 0;
};

inline StructureMatrix structure_matrix(const AreaGraph& g) {
  const auto n = static_cast<Eigen::Index>(g.n_areas());
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(g.n_areas() + 2 * g.edges().size());
  for (std::size_t i = 0; i < g.n_areas(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    trip.emplace_back(ii, ii, static_cast<double>(g.degree(i)));
  }
  for (auto [a, b] : g.edges()) {
    trip.emplace_back(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b), -1.0);
    trip.emplace_back(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a), -1.0);
  }
  StructureMatrix out;
  out.q.resize(n, n);
  out.q.setFromTriplets(trip.begin(), trip.end());
  out.q.makeCompressed();
  out.n_components = connected_components(g).size();
  return out;
}

/// Induced subgraph plus the map from local to parent indices.
struct Subgraph {
  AreaGraph graph;
  std::vector<std::size_t> to_parent;
};

inline Subgraph subgraph(const AreaGraph& g, std::vector<std::size_t> members) {
  if (members.empty()) throw DataError("subgraph: empty member set");
  std::sort(members.begin(), members.end());
  members.erase(std::unique(members.begin(), members.end()), members.end());
  if (members.back() >= g.n_areas()) throw DataError("subgraph: member out of range");
  std::vector<std::size_t> local(g.n_areas(), g.n_areas());
  std::vector<std::string> labels;
  for (std::size_t k = 0; k < members.size(); ++k) {
    local[members[k]] = k;
    labels.push_back(g.labels()[members[k]]);
  }
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (auto [a, b] : g.edges()) {
    if (local[a] < members.size() && local[b] < members.size()) {
      edges.emplace_back(local[a], local[b]);
    }
  }
  return {AreaGraph(std::move(labels), std::move(edges)), std::move(members)};
}

/// Assignment of areas to D subdomains and their k-hop expansions.
/// Subdomain indices are 0-based internally; files use arbitrary ids.
struct PartitionPlan {
  std::size_t n_subdomains = 0;
  std::vector<std::size_t> home;                  // area -> subdomain
  std::size_t order = 0;                          // k
  std::vector<std::vector<std::size_t>> expanded; // sorted members per subdomain
  std::vector<std::string> subdomain_ids;         // external names, optional
};

inline PartitionPlan expand_partition(const AreaGraph& g,
                                      const std::vector<std::size_t>& home,
                                      std::size_t k) {
  if (home.size() != g.n_areas()) {
    throw DataError("partition does not cover every area");
  }
  std::size_t d_count = 0;
  for (std::size_t h : home) d_count = std::max(d_count, h + 1);
  PartitionPlan plan;
  plan.n_subdomains = d_count;
  plan.home = home;
  plan.order = k;
  plan.expanded.resize(d_count);
  for (std::size_t i = 0; i < home.size(); ++i) plan.expanded[home[i]].push_back(i);

  std::vector<std::size_t> dist(g.n_areas());
  for (std::size_t d = 0; d < d_count; ++d) {
    auto& members = plan.expanded[d];
    if (members.empty()) {
      throw DataError("subdomain " + std::to_string(d + 1) + " has no home areas");
    }
    if (k == 0) continue;
    // Breadth-first closure to depth k.
    std::fill(dist.begin(), dist.end(), static_cast<std::size_t>(-1));
    std::vector<std::size_t> frontier = members;
    for (std::size_t i : members) dist[i] = 0;
    for (std::size_t depth = 1; depth <= k && !frontier.empty(); ++depth) {
      std::vector<std::size_t> next;
      for (std::size_t v : frontier) {
        for (std::size_t w : g.neighbours(v)) {
          if (dist[w] == static_cast<std::size_t>(-1)) {
            dist[w] = depth;
            next.push_back(w);
          }
        }
      }
      members.insert(members.end(), next.begin(), next.end());
      frontier = std::move(next);
    }
    std::sort(members.begin(), members.end());
  }
  for (std::size_t d = 0; d < d_count; ++d) {
    plan.subdomain_ids.push_back(std::to_string(d + 1));
  }
  return plan;
}

/// Home map for a lattice cut into br x bc rectangular blocks (row-major).
inline std::vector<std::size_t> block_partition(std::size_t rows, std::size_t cols,
                                                std::size_t block_rows,
                                                std::size_t block_cols) {
  std::vector<std::size_t> home(rows * cols);
  const std::size_t h = (rows + block_rows - 1) / block_rows;
  const std::size_t w = (cols + block_cols - 1) / block_cols;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      home[r * cols + c] = (r / h) * block_cols + (c / w);
  return home;
}

// ---- file formats ---------------------------------------------------------

namespace detail {
inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Splits "a<TAB>b"; comments start with '#'.
inline bool split_tab_pair(std::string line, std::string& a, std::string& b) {
  if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
  line = trim(line);
  if (line.empty()) return false;
  const auto tab = line.find('\t');
  if (tab == std::string::npos) throw DataError("expected two tab-separated fields: " + line);
  a = trim(line.substr(0, tab));
  b = trim(line.substr(tab + 1));
  if (a.empty() || b.empty() || b.find('\t') != std::string::npos) {
    throw DataError("expected two tab-separated fields: " + line);
  }
  return true;
}
}  // namespace detail

inline std::vector<std::pair<std::string, std::string>> read_edge_list(std::istream& in) {
  std::vector<std::pair<std::string, std::string>> out;
  std::string line, a, b;
  while (std::getline(in, line)) {
    if (detail::split_tab_pair(line, a, b)) out.emplace_back(a, b);
  }
  return out;
}

inline std::vector<std::pair<std::string, std::string>> read_edge_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open edge list " + path);
  return read_edge_list(in);
}

inline void write_edge_list(std::ostream& out, const AreaGraph& g) {
  for (auto [a, b] : g.edges()) out << g.labels()[a] << '\t' << g.labels()[b] << '\n';
}

/// Parsed partition file: label -> 0-based subdomain, ids in first-appearance order.
struct PartitionFile {
  std::vector<std::size_t> home;
  std::vector<std::string> subdomain_ids;
};

inline PartitionFile read_partition(std::istream& in, const AreaGraph& g) {
  std::unordered_map<std::string, std::size_t> area;
  for (std::size_t i = 0; i < g.n_areas(); ++i) area.emplace(g.labels()[i], i);
  const std::size_t unset = static_cast<std::size_t>(-1);
  PartitionFile out;
  out.home.assign(g.n_areas(), unset);
  std::map<std::string, std::size_t> ids;
  std::string line, label, sub;
  while (std::getline(in, line)) {
    if (!detail::split_tab_pair(line, label, sub)) continue;
    auto it = area.find(label);
    if (it == area.end()) throw DataError("partition: unknown area '" + label + "'");
    auto [pos, fresh] = ids.emplace(sub, out.subdomain_ids.size());
    if (fresh) out.subdomain_ids.push_back(sub);
    if (out.home[it->second] != unset && out.home[it->second] != pos->second) {
      throw DataError("partition: area '" + label + "' assigned twice");
    }
    out.home[it->second] = pos->second;
  }
  for (std::size_t i = 0; i < g.n_areas(); ++i) {
    if (out.home[i] == unset) {
      throw DataError("partition: area '" + g.labels()[i] + "' has no subdomain");
    }
  }
  return out;
}

inline PartitionFile read_partition(const std::string& path, const AreaGraph& g) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open partition file " + path);
  return read_partition(in, g);
}

}  // namespace mmpart
