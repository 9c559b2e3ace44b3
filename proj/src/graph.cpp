#include "l2p/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <queue>
#include <set>
#include <sstream>

#include <json.hpp>

#include "l2p/errors.hpp"
#include "l2p/io.hpp"
#include "l2p/rng.hpp"

namespace l2p {

using nlohmann::json;

int Graph::num_classes() const {
  int c = -1;
  for (int y : labels) c = std::max(c, y);
  return c + 1;
}

int Graph::count(const std::vector<bool>& mask) const {
  int n = 0;
  for (bool b : mask) n += b ? 1 : 0;
  return n;
}

void Graph::validate() const {
  if (num_nodes <= 0) throw DatasetError("graph has no nodes");
  if (features.rows() != num_nodes)
    throw DatasetError("feature rows " + std::to_string(features.rows()) + " != num_nodes " +
                       std::to_string(num_nodes));
  if (features.cols() < 1) throw DatasetError("graph has no feature columns");
  if (static_cast<int>(labels.size()) != num_nodes)
    throw DatasetError("label count != num_nodes");
  for (const auto& m : {&train_mask, &val_mask, &test_mask})
    if (static_cast<int>(m->size()) != num_nodes)
      throw DatasetError("mask length != num_nodes");
  for (int n = 0; n < num_nodes; ++n) {
    if (labels[static_cast<std::size_t>(n)] < -1)
      throw DatasetError("node " + std::to_string(n) + " has label < -1");
    const int in = (train_mask[static_cast<std::size_t>(n)] ? 1 : 0) +
                   (val_mask[static_cast<std::size_t>(n)] ? 1 : 0) +
                   (test_mask[static_cast<std::size_t>(n)] ? 1 : 0);
    if (in > 1) throw DatasetError("node " + std::to_string(n) + " is in multiple masks");
    if ((train_mask[static_cast<std::size_t>(n)] || val_mask[static_cast<std::size_t>(n)]) &&
        labels[static_cast<std::size_t>(n)] < 0)
      throw DatasetError("train/val node " + std::to_string(n) + " has no label");
  }
  std::set<std::pair<int, int>> seen;
  for (const auto& [u, v] : edges) {
    if (u < 0 || v < 0 || u >= num_nodes || v >= num_nodes)
      throw DatasetError("edge endpoint out of range: " + std::to_string(u) + "," +
                         std::to_string(v));
    if (u >= v) throw DatasetError("edge not canonical (u < v required)");
    if (!seen.emplace(u, v).second)
      throw DatasetError("duplicate edge " + std::to_string(u) + "-" + std::to_string(v));
  }
}

namespace {

// Symmetrize, dedupe, and order raw input edges. Self edges are malformed
// input; renormalization adds its own self-loops.
std::vector<std::pair<int, int>> canonicalize_edges(
    const std::vector<std::pair<int, int>>& raw, int num_nodes) {
  std::set<std::pair<int, int>> out;
  for (const auto& [a, b] : raw) {
    if (a < 0 || b < 0 || a >= num_nodes || b >= num_nodes)
      throw DatasetError("edge endpoint out of range: " + std::to_string(a) + "," +
                         std::to_string(b));
    if (a == b) throw DatasetError("self edge at node " + std::to_string(a));
    out.emplace(std::min(a, b), std::max(a, b));
  }
  return {out.begin(), out.end()};
}

std::vector<bool> read_mask(const json& j, const char* field, int n) {
  if (!j.contains(field) || !j[field].is_array())
    throw DatasetError(std::string("missing or non-array field '") + field + "'");
  const auto& arr = j[field];
  if (static_cast<int>(arr.size()) != n)
    throw DatasetError(std::string(field) + " length " + std::to_string(arr.size()) +
                       " != num_nodes " + std::to_string(n));
  std::vector<bool> out(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_boolean())
      throw DatasetError(std::string(field) + "[" + std::to_string(i) + "] is not a boolean");
    out[i] = arr[i].get<bool>();
  }
  return out;
}

Graph load_json_graph(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw DatasetError(path + ": " + e.what());
  }
  if (!j.is_object()) throw DatasetError(path + ": top level is not an object");
  if (!j.contains("num_nodes") || !j["num_nodes"].is_number_integer())
    throw DatasetError(path + ": missing integer field 'num_nodes'");
  Graph g;
  g.num_nodes = j["num_nodes"].get<int>();
  if (g.num_nodes <= 0) throw DatasetError(path + ": num_nodes must be positive");

  if (!j.contains("features") || !j["features"].is_array() ||
      static_cast<int>(j["features"].size()) != g.num_nodes)
    throw DatasetError(path + ": 'features' must be an array of num_nodes rows");
  const auto& feats = j["features"];
  const int d = feats[0].is_array() ? static_cast<int>(feats[0].size()) : -1;
  if (d < 1) throw DatasetError(path + ": features[0] is not a nonempty array");
  g.features = Tensor(g.num_nodes, d);
  for (int r = 0; r < g.num_nodes; ++r) {
    const auto& row = feats[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<int>(row.size()) != d)
      throw DatasetError(path + ": features[" + std::to_string(r) + "] length != " +
                         std::to_string(d));
    for (int c = 0; c < d; ++c) {
      const auto& cell = row[static_cast<std::size_t>(c)];
      if (!cell.is_number())
        throw DatasetError(path + ": features[" + std::to_string(r) + "][" +
                           std::to_string(c) + "] is not a number");
      g.features.at(r, c) = cell.get<double>();
    }
  }

  if (!j.contains("labels") || !j["labels"].is_array() ||
      static_cast<int>(j["labels"].size()) != g.num_nodes)
    throw DatasetError(path + ": 'labels' must be an array of num_nodes ints");
  g.labels.resize(static_cast<std::size_t>(g.num_nodes));
  for (int n = 0; n < g.num_nodes; ++n) {
    const auto& cell = j["labels"][static_cast<std::size_t>(n)];
    if (!cell.is_number_integer())
      throw DatasetError(path + ": labels[" + std::to_string(n) + "] is not an integer");
    g.labels[static_cast<std::size_t>(n)] = cell.get<int>();
  }

  if (!j.contains("edges") || !j["edges"].is_array())
    throw DatasetError(path + ": missing array field 'edges'");
  std::vector<std::pair<int, int>> raw;
  raw.reserve(j["edges"].size());
  for (std::size_t i = 0; i < j["edges"].size(); ++i) {
    const auto& e = j["edges"][i];
    if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() ||
        !e[1].is_number_integer())
      throw DatasetError(path + ": edges[" + std::to_string(i) + "] is not an [int,int] pair");
    raw.emplace_back(e[0].get<int>(), e[1].get<int>());
  }
  g.edges = canonicalize_edges(raw, g.num_nodes);

  g.train_mask = read_mask(j, "train_mask", g.num_nodes);
  g.val_mask = read_mask(j, "val_mask", g.num_nodes);
  g.test_mask = read_mask(j, "test_mask", g.num_nodes);
  g.validate();
  return g;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == '\t') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

int parse_int(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DatasetError(where + ": expected integer, got '" + s + "'");
  }
}

double parse_real(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DatasetError(where + ": expected number, got '" + s + "'");
  }
}

std::string companion_edge_path(const std::string& path) {
  const std::size_t slash = path.find_last_of('/');
  const std::size_t dot = path.find_last_of('.');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash))
    return path + ".edges";
  return path.substr(0, dot) + ".edges";
}

Graph load_tsv_graph(const std::string& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw DatasetError(path + ": empty file (header expected)");

  Graph g;
  std::vector<std::vector<double>> rows;
  int d = -1;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path + " line " + std::to_string(lineno);
    const auto cols = split_tabs(line);
    if (static_cast<int>(cols.size()) < 4)
      throw DatasetError(where + ": expected id, label, mask, features");
    if (d == -1) d = static_cast<int>(cols.size()) - 3;
    if (static_cast<int>(cols.size()) != d + 3)
      throw DatasetError(where + ": expected " + std::to_string(d + 3) + " columns, got " +
                         std::to_string(cols.size()));
    const int id = parse_int(cols[0], where);
    if (id != static_cast<int>(rows.size()))
      throw DatasetError(where + ": ids must be 0..N-1 in order, got " + std::to_string(id));
    g.labels.push_back(parse_int(cols[1], where));
    const std::string& mask = cols[2];
    g.train_mask.push_back(mask == "train");
    g.val_mask.push_back(mask == "val");
    g.test_mask.push_back(mask == "test");
    if (mask != "train" && mask != "val" && mask != "test" && mask != "none")
      throw DatasetError(where + ": mask must be train/val/test/none, got '" + mask + "'");
    std::vector<double> feat(static_cast<std::size_t>(d));
    for (int c = 0; c < d; ++c)
      feat[static_cast<std::size_t>(c)] = parse_real(cols[static_cast<std::size_t>(c) + 3], where);
    rows.push_back(std::move(feat));
  }
  if (rows.empty()) throw DatasetError(path + ": no node rows");
  g.num_nodes = static_cast<int>(rows.size());
  g.features = Tensor(g.num_nodes, d);
  for (int r = 0; r < g.num_nodes; ++r)
    for (int c = 0; c < d; ++c)
      g.features.at(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];

  const std::string epath = companion_edge_path(path);
  std::istringstream ein(read_file(epath));
  std::vector<std::pair<int, int>> raw;
  lineno = 0;
  while (std::getline(ein, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = epath + " line " + std::to_string(lineno);
    std::istringstream ls(line);
    std::string a, b, extra;
    if (!(ls >> a >> b) || (ls >> extra))
      throw DatasetError(where + ": expected 'u v'");
    raw.emplace_back(parse_int(a, where), parse_int(b, where));
  }
  g.edges = canonicalize_edges(raw, g.num_nodes);
  g.validate();
  return g;
}

}  // namespace

Graph load_graph(const std::string& path, const std::string& format) {
  if (format == "json") return load_json_graph(path);
  if (format == "tsv") return load_tsv_graph(path);
  throw ConfigError("unknown dataset format '" + format + "' (expected json or tsv)");
}

void save_graph(const Graph& g, const std::string& path) {
  g.validate();
  json j;
  j["num_nodes"] = g.num_nodes;
  json feats = json::array();
  for (int r = 0; r < g.num_nodes; ++r) {
    json row = json::array();
    for (int c = 0; c < g.features.cols(); ++c) row.push_back(g.features.at(r, c));
    feats.push_back(std::move(row));
  }
  j["features"] = std::move(feats);
  j["labels"] = g.labels;
  json edges = json::array();
  for (const auto& [u, v] : g.edges) edges.push_back(json::array({u, v}));
  j["edges"] = std::move(edges);
  j["train_mask"] = g.train_mask;
  j["val_mask"] = g.val_mask;
  j["test_mask"] = g.test_mask;
  write_file_atomic(path, j.dump());
}

CsrMatrix normalize_adjacency(const Graph& g) {
  std::vector<int> deg(static_cast<std::size_t>(g.num_nodes), 1);  // self-loop
  for (const auto& [u, v] : g.edges) {
    ++deg[static_cast<std::size_t>(u)];
    ++deg[static_cast<std::size_t>(v)];
  }
  std::vector<std::pair<std::pair<int, int>, double>> trips;
  trips.reserve(g.edges.size() * 2 + static_cast<std::size_t>(g.num_nodes));
  for (int n = 0; n < g.num_nodes; ++n)
    trips.push_back({{n, n}, 1.0 / deg[static_cast<std::size_t>(n)]});
  for (const auto& [u, v] : g.edges) {
    const double w =
        1.0 / std::sqrt(static_cast<double>(deg[static_cast<std::size_t>(u)]) *
                        static_cast<double>(deg[static_cast<std::size_t>(v)]));
    trips.push_back({{u, v}, w});
    trips.push_back({{v, u}, w});
  }
  CsrMatrix adj = CsrMatrix::from_triplets(g.num_nodes, g.num_nodes, std::move(trips));
  adj.symmetric = true;
  return adj;
}

Tensor aggregate(const CsrMatrix& adj, const Tensor& h) { return spmm(adj, h); }

Graph carve_validation(const Graph& g, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0) || !(fraction < 1.0))
    throw ConfigError("carve_validation: fraction must be in (0, 1)");
  if (g.count(g.val_mask) != 0)
    throw ConfigError("carve_validation: validation mask is already populated");
  std::map<int, std::vector<int>> by_class;
  for (int n = 0; n < g.num_nodes; ++n)
    if (g.train_mask[static_cast<std::size_t>(n)])
      by_class[g.labels[static_cast<std::size_t>(n)]].push_back(n);
  if (by_class.empty()) throw ConfigError("carve_validation: no train nodes");

  Graph out = g;
  Rng rng(seed);
  int moved = 0;
  for (auto& [label, ids] : by_class) {
    if (ids.size() < 2)
      throw ConfigError("carve_validation: class " + std::to_string(label) +
                        " has fewer than 2 train nodes");
    const int take =
        static_cast<int>(std::lround(fraction * static_cast<double>(ids.size())));
    if (take >= static_cast<int>(ids.size()))
      throw ConfigError("carve_validation: fraction leaves class " + std::to_string(label) +
                        " without train nodes");
    rng.shuffle(ids);
    for (int i = 0; i < take; ++i) {
      out.train_mask[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)])] = false;
      out.val_mask[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)])] = true;
      ++moved;
    }
  }
  if (moved == 0) throw ConfigError("carve_validation: fraction too small to move any node");
  out.validate();
  return out;
}

namespace {

void check_synthetic(const SyntheticSpec& s) {
  if (s.hops.empty() || s.hops.size() != s.homophily.size())
    throw ConfigError("synthetic: hops and homophily must list one entry per block");
  for (double h : s.homophily)
    if (h < 0.0 || h > 1.0) throw ConfigError("synthetic: homophily must be in [0, 1]");
  for (int h : s.hops) {
    if (h < 0 || h > 2) throw ConfigError("synthetic: hop targets must be in {0, 1, 2}");
    if (h > s.max_depth)
      throw ConfigError("synthetic: hop target " + std::to_string(h) + " exceeds max depth " +
                        std::to_string(s.max_depth));
  }
  if (s.num_classes < 2) throw ConfigError("synthetic: need at least 2 classes");
  if (s.feature_dim < s.num_classes)
    throw ConfigError("synthetic: feature_dim must be >= num_classes");
  if (s.avg_degree < 1) throw ConfigError("synthetic: avg_degree must be >= 1");
  if (s.nodes_per_block < 4 * s.num_classes || s.nodes_per_block <= s.avg_degree)
    throw ConfigError("synthetic: block size too small for the requested structure");
  if (!(s.train_frac > 0.0) || !(s.val_frac > 0.0) || s.train_frac + s.val_frac >= 1.0)
    throw ConfigError("synthetic: train/val fractions must be positive and sum below 1");
  if (s.signal_scale <= 0.0) throw ConfigError("synthetic: signal_scale must be positive");
}

}  // namespace

Graph make_synthetic(const SyntheticSpec& spec) {
  check_synthetic(spec);
  const int blocks = static_cast<int>(spec.hops.size());
  const int npb = spec.nodes_per_block;
  const int n = blocks * npb;
  const int c = spec.num_classes;
  Rng rng(spec.seed);

  std::vector<int> planted(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) planted[static_cast<std::size_t>(i)] = (i % npb) % c;

  // Edges: each node initiates avg_degree/2 links inside its block; the
  // partner shares its planted label with probability homophily[block].
  std::set<std::pair<int, int>> edge_set;
  const int initiate = std::max(1, spec.avg_degree / 2);
  for (int b = 0; b < blocks; ++b) {
    const int lo = b * npb;
    const double hom = spec.homophily[static_cast<std::size_t>(b)];
    for (int i = lo; i < lo + npb; ++i) {
      for (int e = 0; e < initiate; ++e) {
        const bool want_same = rng.uniform01() < hom;
        for (int tries = 0; tries < 64; ++tries) {
          const int j = lo + rng.index(npb);
          if (j == i) continue;
          const bool same = planted[static_cast<std::size_t>(j)] ==
                            planted[static_cast<std::size_t>(i)];
          if (same != want_same) continue;
          const auto key = std::minmax(i, j);
          if (edge_set.emplace(key.first, key.second).second) break;
        }
      }
    }
  }

  Graph g;
  g.num_nodes = n;
  g.edges.assign(edge_set.begin(), edge_set.end());
  g.labels.assign(static_cast<std::size_t>(n), -1);
  g.features = Tensor(n, spec.feature_dim);
  for (int i = 0; i < n; ++i)
    for (int f = 0; f < spec.feature_dim; ++f) g.features.at(i, f) = rng.normal();

  std::vector<std::vector<int>> nbrs(static_cast<std::size_t>(n));
  for (const auto& [u, v] : g.edges) {
    nbrs[static_cast<std::size_t>(u)].push_back(v);
    nbrs[static_cast<std::size_t>(v)].push_back(u);
  }

  for (int b = 0; b < blocks; ++b) {
    const int lo = b * npb;
    const int hop = spec.hops[static_cast<std::size_t>(b)];
    for (int i = lo; i < lo + npb; ++i) {
      if (hop == 0) {
        // Label is a deterministic readout of the node's own features.
        g.features.at(i, planted[static_cast<std::size_t>(i)]) += spec.signal_scale;
        int best = 0;
        for (int f = 1; f < c; ++f)
          if (g.features.at(i, f) > g.features.at(i, best)) best = f;
        g.labels[static_cast<std::size_t>(i)] = best;
      } else {
        // Majority planted label over the <=hop ball (self included);
        // features stay pure noise so only aggregation can recover this.
        std::vector<int> dist(static_cast<std::size_t>(n), -1);
        std::queue<int> q;
        q.push(i);
        dist[static_cast<std::size_t>(i)] = 0;
        std::vector<int> votes(static_cast<std::size_t>(c), 0);
        while (!q.empty()) {
          const int u = q.front();
          q.pop();
          ++votes[static_cast<std::size_t>(planted[static_cast<std::size_t>(u)])];
          if (dist[static_cast<std::size_t>(u)] == hop) continue;
          for (int v : nbrs[static_cast<std::size_t>(u)]) {
            if (dist[static_cast<std::size_t>(v)] != -1) continue;
            dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
            q.push(v);
          }
        }
        int best = 0;
        for (int f = 1; f < c; ++f)
          if (votes[static_cast<std::size_t>(f)] > votes[static_cast<std::size_t>(best)])
            best = f;
        g.labels[static_cast<std::size_t>(i)] = best;
      }
    }
  }

  // Stratified masks per (block, label) group.
  g.train_mask.assign(static_cast<std::size_t>(n), false);
  g.val_mask.assign(static_cast<std::size_t>(n), false);
  g.test_mask.assign(static_cast<std::size_t>(n), false);
  for (int b = 0; b < blocks; ++b) {
    std::map<int, std::vector<int>> groups;
    for (int i = b * npb; i < (b + 1) * npb; ++i)
      groups[g.labels[static_cast<std::size_t>(i)]].push_back(i);
    for (auto& [label, ids] : groups) {
      rng.shuffle(ids);
      const int sz = static_cast<int>(ids.size());
      const int tr = std::max(1, static_cast<int>(std::lround(spec.train_frac * sz)));
      const int va = std::max(1, static_cast<int>(std::lround(spec.val_frac * sz)));
      if (tr + va >= sz)
        throw ConfigError("synthetic: class " + std::to_string(label) + " in block " +
                          std::to_string(b) + " too small for the train/val/test split");
      for (int k = 0; k < sz; ++k) {
        const std::size_t id = static_cast<std::size_t>(ids[static_cast<std::size_t>(k)]);
        if (k < tr)
          g.train_mask[id] = true;
        else if (k < tr + va)
          g.val_mask[id] = true;
        else
          g.test_mask[id] = true;
      }
    }
  }

  g.validate();
  return g;
}

}  // namespace l2p
