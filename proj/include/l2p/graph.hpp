#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "l2p/sparse.hpp"
#include "l2p/tensor.hpp"

namespace l2p {

/// Undirected graph with dense node features, optional labels (-1 means
/// unknown), and disjoint train/val/test masks. Immutable by convention
/// once built; loaders and generators return it fully validated.
struct Graph {
  int num_nodes = 0;
  Tensor features;                         // num_nodes x feature_dim
  std::vector<int> labels;                 // -1 for unlabeled nodes
  std::vector<std::pair<int, int>> edges;  // canonical u < v, deduplicated
  std::vector<bool> train_mask;
  std::vector<bool> val_mask;
  std::vector<bool> test_mask;

  int feature_dim() const { return features.cols(); }
  /// Largest label + 1 (0 for a fully unlabeled graph).
  int num_classes() const;
  int count(const std::vector<bool>& mask) const;

  /// Throws DatasetError when any structural invariant is broken.
  void validate() const;
};

/// Parameters for the planted-hop benchmark generator. Each block gets its
/// own homophily level and "optimal hop": the number of propagation steps
/// after which its labels become recoverable. Blocks are disconnected from
/// each other.
struct SyntheticSpec {
  int nodes_per_block = 300;
  int feature_dim = 16;
  int num_classes = 4;
  std::vector<double> homophily = {0.1, 0.9};  // same-label edge probability
  std::vector<int> hops = {0, 2};              // per block, in {0, 1, 2}
  int max_depth = 8;       // hop targets must not exceed this
  int avg_degree = 8;
  double signal_scale = 3.0;  // feature signal strength for hop-0 blocks
  double train_frac = 0.3;
  double val_frac = 0.2;
  std::uint64_t seed = 1;
};

/// Read a graph from disk. format is "json" (the container layout) or
/// "tsv" (header + node rows, edges in a companion file that replaces the
/// extension with ".edges"). Directed duplicates are merged; self edges
/// are rejected.
Graph load_graph(const std::string& path, const std::string& format);

/// Write the JSON container for g (atomic: temp file + rename).
void save_graph(const Graph& g, const std::string& path);

/// Symmetric renormalized adjacency D^{-1/2} (A + I) D^{-1/2} with
/// self-loops, so isolated nodes get a 1.0 diagonal.
CsrMatrix normalize_adjacency(const Graph& g);

/// One propagation step: out[n] = sum_u adj(n,u) * h[u].
Tensor aggregate(const CsrMatrix& adj, const Tensor& h);

/// Move a stratified fraction of train nodes into the (empty) validation
/// mask. Every class must retain at least one train node.
Graph carve_validation(const Graph& g, double fraction, std::uint64_t seed);

/// Generate the planted-hop benchmark described by spec. Hop-0 blocks carry
/// label signal in their own features; hop-1/2 blocks have pure-noise
/// features and labels equal to the majority planted label within their
/// 1/2-hop neighborhood, so only aggregation can recover them.
Graph make_synthetic(const SyntheticSpec& spec);

}  // namespace l2p
