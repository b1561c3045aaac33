#pragma once

#include "poer/common.hpp"
#include "poer/rng.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace poer {

/// Synthetic multi-domain generator settings.
///
/// Each sample of category y in domain d has latent
///   z = [ s_y + e_s ; t_d + c * u_y + e_t ],   e ~ N(0, sigma^2 I)
/// with c = 1 with probability rho(d), else 0, and is observed as x = W z.
/// rho(d) = rho for every domain except the clean domain, where it is 0.
struct DatasetSpec {
  int categories = 5;        // K
  int domains = 4;           // D
  int signal_dim = 8;        // q
  int nuisance_dim = 8;      // r
  int observed_dim = 32;     // p
  double sigma = 0.5;
  double rho = 0.9;
  /// Domain without spurious nuisance; unset means the last domain, -1 none.
  std::optional<int> clean_domain;
  int samples_per_cell = 200;  // N
  std::uint64_t seed = 0;
  double tau_signal = 3.0;
  double tau_nuisance = 3.0;
  double tau_domain = 3.0;
  /// Test override: W = identity (requires observed_dim == q + r).
  bool identity_mixing = false;

  double rho_for(int domain) const;
  int resolved_clean_domain() const;
  void validate() const;
};

struct GeneratorMetadata {
  Matrix category_templates;   // K x q, rows of norm tau_signal
  Matrix category_nuisance;    // K x r, rows of norm tau_nuisance
  Matrix domain_embeddings;    // D x r, rows of norm tau_domain
  Matrix mixing;               // p x (q + r)
};

struct Sample {
  std::vector<double> x;
  int y = 0;
  int d = 0;
};

/// Samples are stored category-major, then domain, then index within the cell.
struct Dataset {
  DatasetSpec spec;
  GeneratorMetadata meta;
  Matrix x;
  std::vector<int> y;
  std::vector<int> d;

  std::size_t size() const { return y.size(); }
  Sample sample(std::size_t i) const;
};

Dataset generate(const DatasetSpec& spec);

/// A labeled subset of a dataset.
struct DataSplit {
  Matrix x;
  std::vector<int> y;
  std::vector<int> d;
  /// Row index of each sample in the originating dataset.
  std::vector<std::size_t> source_index;
  int categories = 0;
  int domains = 0;

  std::size_t size() const { return y.size(); }
  bool empty() const { return y.empty(); }
};

/// Everything in one split: the full dataset viewed as a DataSplit.
DataSplit as_split(const Dataset& data);

struct DomainSplits {
  DataSplit train;
  DataSplit val;
  DataSplit test;
  int target_domain = 0;
};

/// All target-domain samples go to `test`. Every source (category, domain)
/// cell is shuffled with its own stream and its first round(val_fraction * n)
/// samples go to `val`, the rest to `train`. Splits keep dataset order.
DomainSplits leave_one_domain_out(const Dataset& data, int target_domain, double val_fraction,
                                  std::uint64_t seed);

/// Emits index batches over a split such that every anchor in a batch has
/// all four relation groups (same/other category x same/other domain).
///
/// Full-grid mode, used when the split's categories x domains grid is complete
/// and batch_size >= 2 * cells: an epoch has T = ceil(n / batch_size) batches
/// and batch t takes floor((t+1)|c|/T) - floor(t|c|/T) entries of each cell's
/// fresh permutation, topped up to 2 from the rest of the cell if needed.
///
/// Subgrid mode otherwise: each batch is one complete 2 x 2 block of cells,
/// chosen among blocks containing the cell with the most unvisited samples,
/// with batch_size / 4 slots per cell. The epoch ends once every sample has
/// been emitted.
///
/// Batches hold roughly batch_size indices, ascending within each batch.
class BatchSampler {
 public:
  BatchSampler(const DataSplit& split, std::size_t batch_size, std::uint64_t seed);

  std::vector<std::vector<std::size_t>> next_epoch();

  bool full_grid() const { return full_grid_; }
  const CounterRng::State& rng_state() const { return rng_.state(); }

 private:
  struct Cell {
    int category;
    int domain;
    std::vector<std::size_t> members;
  };

  void top_up(const Cell& cell, std::size_t want, std::vector<std::size_t>& batch,
              std::vector<std::size_t>& taken);
  std::vector<std::vector<std::size_t>> full_grid_epoch();
  std::vector<std::vector<std::size_t>> subgrid_epoch();

  std::size_t batch_size_;
  std::size_t total_ = 0;
  std::vector<Cell> cells_;
  std::vector<std::array<std::size_t, 4>> blocks_;
  bool full_grid_ = false;
  CounterRng rng_;
};

}  // namespace poer
