#include "poer/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

namespace poer {

double DatasetSpec::rho_for(int domain) const {
  return domain == resolved_clean_domain() ? 0.0 : rho;
}

int DatasetSpec::resolved_clean_domain() const {
  return clean_domain.value_or(domains - 1);
}

void DatasetSpec::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("dataset spec: " + msg); };
  if (categories < 2) fail("K (categories) must be >= 2, got " + std::to_string(categories));
  if (domains < 3) fail("D (domains) must be >= 3, got " + std::to_string(domains));
  if (signal_dim < 1) fail("q (signal_dim) must be >= 1");
  if (nuisance_dim < 1) fail("r (nuisance_dim) must be >= 1");
  if (observed_dim < signal_dim + nuisance_dim) fail("p (observed_dim) must be >= q + r");
  if (samples_per_cell < 2) fail("N (samples_per_cell) must be >= 2, got " + std::to_string(samples_per_cell));
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) fail("sigma must be finite and >= 0");
  if (!(rho >= 0.0 && rho <= 1.0)) fail("rho must lie in [0, 1]");
  if (clean_domain && (*clean_domain < -1 || *clean_domain >= domains)) {
    fail("clean_domain must be -1 or a valid domain index");
  }
  for (double tau : {tau_signal, tau_nuisance, tau_domain}) {
    if (!(tau >= 0.0) || !std::isfinite(tau)) fail("template norms must be finite and >= 0");
  }
  if (identity_mixing && observed_dim != signal_dim + nuisance_dim) {
    fail("identity_mixing requires p == q + r");
  }
}

Sample Dataset::sample(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("sample index out of range");
  const auto row = row_span(x, static_cast<Eigen::Index>(i));
  return {std::vector<double>(row.begin(), row.end()), y[i], d[i]};
}

namespace {

Matrix normalized_rows(int rows, int cols, double norm, CounterRng rng) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = rng.normal();
    const double n = m.row(i).norm();
    if (n > 0.0) m.row(i) *= norm / n;
  }
  return m;
}

}  // namespace

Dataset generate(const DatasetSpec& spec) {
  spec.validate();
  Dataset out;
  out.spec = spec;
  const int q = spec.signal_dim;
  const int r = spec.nuisance_dim;
  const int p = spec.observed_dim;
  out.meta.category_templates =
      normalized_rows(spec.categories, q, spec.tau_signal, stream(spec.seed, Stream::kCategoryTemplates));
  out.meta.category_nuisance =
      normalized_rows(spec.categories, r, spec.tau_nuisance, stream(spec.seed, Stream::kCategoryNuisance));
  out.meta.domain_embeddings =
      normalized_rows(spec.domains, r, spec.tau_domain, stream(spec.seed, Stream::kDomainEmbeddings));
  if (spec.identity_mixing) {
    out.meta.mixing = Matrix::Identity(p, q + r);
  } else {
    CounterRng rng = stream(spec.seed, Stream::kMixing);
    const double scale = 1.0 / std::sqrt(static_cast<double>(q + r));
    out.meta.mixing.resize(p, q + r);
    for (int i = 0; i < p; ++i) {
      for (int j = 0; j < q + r; ++j) out.meta.mixing(i, j) = scale * rng.normal();
    }
  }

  const auto total = static_cast<Eigen::Index>(spec.categories) * spec.domains * spec.samples_per_cell;
  Matrix latent(total, q + r);
  out.y.reserve(static_cast<std::size_t>(total));
  out.d.reserve(static_cast<std::size_t>(total));
  Eigen::Index row = 0;
  for (int cat = 0; cat < spec.categories; ++cat) {
    for (int dom = 0; dom < spec.domains; ++dom) {
      const double rho = spec.rho_for(dom);
      for (int n = 0; n < spec.samples_per_cell; ++n, ++row) {
        CounterRng rng = CounterRng::derive(
            spec.seed, {static_cast<std::uint64_t>(Stream::kSamples), static_cast<std::uint64_t>(cat),
                        static_cast<std::uint64_t>(dom), static_cast<std::uint64_t>(n)});
        const double c = rng.uniform() < rho ? 1.0 : 0.0;
        for (int j = 0; j < q; ++j) {
          latent(row, j) = out.meta.category_templates(cat, j) + spec.sigma * rng.normal();
        }
        for (int j = 0; j < r; ++j) {
          latent(row, q + j) = out.meta.domain_embeddings(dom, j) +
                               c * out.meta.category_nuisance(cat, j) + spec.sigma * rng.normal();
        }
        out.y.push_back(cat);
        out.d.push_back(dom);
      }
    }
  }
  out.x = latent * out.meta.mixing.transpose();
  return out;
}

DataSplit as_split(const Dataset& data) {
  DataSplit s;
  s.x = data.x;
  s.y = data.y;
  s.d = data.d;
  s.source_index.resize(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) s.source_index[i] = i;
  s.categories = data.spec.categories;
  s.domains = data.spec.domains;
  return s;
}

namespace {

DataSplit gather(const Dataset& data, std::vector<std::size_t> rows) {
  std::sort(rows.begin(), rows.end());
  DataSplit s;
  s.categories = data.spec.categories;
  s.domains = data.spec.domains;
  s.x.resize(static_cast<Eigen::Index>(rows.size()), data.x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    s.x.row(static_cast<Eigen::Index>(i)) = data.x.row(static_cast<Eigen::Index>(rows[i]));
    s.y.push_back(data.y[rows[i]]);
    s.d.push_back(data.d[rows[i]]);
  }
  s.source_index = std::move(rows);
  return s;
}

}  // namespace

DomainSplits leave_one_domain_out(const Dataset& data, int target_domain, double val_fraction,
                                  std::uint64_t seed) {
  if (target_domain < 0 || target_domain >= data.spec.domains) {
    throw std::invalid_argument("target domain " + std::to_string(target_domain) +
                                " is not a domain of this dataset");
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("val_fraction must lie in (0, 1)");
  }
  std::map<std::pair<int, int>, std::vector<std::size_t>> cells;
  std::vector<std::size_t> test_rows;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.d[i] == target_domain) {
      test_rows.push_back(i);
    } else {
      cells[{data.y[i], data.d[i]}].push_back(i);
    }
  }
  if (test_rows.empty()) {
    throw std::invalid_argument("target domain " + std::to_string(target_domain) + " has no samples");
  }
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> val_rows;
  for (auto& [key, members] : cells) {
    const auto cell_id = static_cast<std::uint64_t>(key.first) * static_cast<std::uint64_t>(data.spec.domains) +
                         static_cast<std::uint64_t>(key.second);
    CounterRng rng = stream(seed, Stream::kSplit, cell_id);
    rng.shuffle(members);
    const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(members.size())));
    val_rows.insert(val_rows.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_rows.insert(train_rows.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
  }
  DomainSplits out;
  out.target_domain = target_domain;
  out.train = gather(data, std::move(train_rows));
  out.val = gather(data, std::move(val_rows));
  out.test = gather(data, std::move(test_rows));
  return out;
}

BatchSampler::BatchSampler(const DataSplit& split, std::size_t batch_size, std::uint64_t seed)
    : batch_size_(batch_size), rng_(stream(seed, Stream::kSampler)) {
  if (batch_size < 8) throw ConfigError("batch size must be >= 8, got " + std::to_string(batch_size));
  std::map<std::pair<int, int>, std::vector<std::size_t>> by_cell;
  for (std::size_t i = 0; i < split.size(); ++i) by_cell[{split.y[i], split.d[i]}].push_back(i);
  std::vector<int> cats;
  std::vector<int> doms;
  for (auto& [key, members] : by_cell) {
    if (members.size() < 2) {
      throw ConfigError("cell (category " + std::to_string(key.first) + ", domain " +
                        std::to_string(key.second) + ") has fewer than 2 samples");
    }
    cells_.push_back({key.first, key.second, std::move(members)});
    total_ += cells_.back().members.size();
    cats.push_back(key.first);
    doms.push_back(key.second);
  }
  std::sort(cats.begin(), cats.end());
  cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
  std::sort(doms.begin(), doms.end());
  doms.erase(std::unique(doms.begin(), doms.end()), doms.end());
  if (cats.size() < 2 || doms.size() < 2) {
    throw ConfigError("training split needs at least 2 categories and 2 domains");
  }

  auto cell_of = [&](int c, int d) -> std::ptrdiff_t {
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      if (cells_[i].category == c && cells_[i].domain == d) return static_cast<std::ptrdiff_t>(i);
    }
    return -1;
  };
  const bool complete = cells_.size() == cats.size() * doms.size();
  full_grid_ = complete && batch_size_ >= 2 * cells_.size();
  if (full_grid_) return;

  std::vector<bool> covered(cells_.size(), false);
  for (std::size_t a = 0; a < cats.size(); ++a) {
    for (std::size_t b = a + 1; b < cats.size(); ++b) {
      for (std::size_t u = 0; u < doms.size(); ++u) {
        for (std::size_t v = u + 1; v < doms.size(); ++v) {
          const std::ptrdiff_t ids[4] = {cell_of(cats[a], doms[u]), cell_of(cats[a], doms[v]),
                                         cell_of(cats[b], doms[u]), cell_of(cats[b], doms[v])};
          if (std::any_of(std::begin(ids), std::end(ids), [](std::ptrdiff_t i) { return i < 0; })) continue;
          std::array<std::size_t, 4> block{};
          for (int k = 0; k < 4; ++k) {
            block[static_cast<std::size_t>(k)] = static_cast<std::size_t>(ids[k]);
            covered[static_cast<std::size_t>(ids[k])] = true;
          }
          blocks_.push_back(block);
        }
      }
    }
  }
  if (blocks_.empty()) throw ConfigError("training split has no complete 2 x 2 category/domain block");
  for (std::size_t i = 0; i < cells_.size(); ++i) {
    if (!covered[i]) {
      throw ConfigError("cell (category " + std::to_string(cells_[i].category) + ", domain " +
                        std::to_string(cells_[i].domain) + ") belongs to no complete 2 x 2 block");
    }
  }
}

void BatchSampler::top_up(const Cell& cell, std::size_t want, std::vector<std::size_t>& batch,
                          std::vector<std::size_t>& taken) {
  while (taken.size() < want) {
    const std::size_t pick = cell.members[static_cast<std::size_t>(rng_.below(cell.members.size()))];
    if (std::find(taken.begin(), taken.end(), pick) != taken.end()) continue;
    taken.push_back(pick);
    batch.push_back(pick);
  }
}

std::vector<std::vector<std::size_t>> BatchSampler::next_epoch() {
  return full_grid_ ? full_grid_epoch() : subgrid_epoch();
}

std::vector<std::vector<std::size_t>> BatchSampler::full_grid_epoch() {
  std::vector<std::vector<std::size_t>> perms;
  perms.reserve(cells_.size());
  for (const auto& c : cells_) {
    perms.push_back(c.members);
    rng_.shuffle(perms.back());
  }
  const std::size_t batches = (total_ + batch_size_ - 1) / batch_size_;
  std::vector<std::vector<std::size_t>> out(batches);
  for (std::size_t t = 0; t < batches; ++t) {
    auto& batch = out[t];
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      const std::size_t n = perms[c].size();
      const std::size_t lo = t * n / batches;
      const std::size_t hi = (t + 1) * n / batches;
      std::vector<std::size_t> taken(perms[c].begin() + static_cast<std::ptrdiff_t>(lo),
                                     perms[c].begin() + static_cast<std::ptrdiff_t>(hi));
      batch.insert(batch.end(), taken.begin(), taken.end());
      top_up(cells_[c], 2, batch, taken);
    }
    std::sort(batch.begin(), batch.end());
  }
  return out;
}

std::vector<std::vector<std::size_t>> BatchSampler::subgrid_epoch() {
  std::vector<std::vector<std::size_t>> queues;
  for (const auto& c : cells_) {
    queues.push_back(c.members);
    rng_.shuffle(queues.back());
  }
  std::vector<std::size_t> next(cells_.size(), 0);
  const std::size_t slots = std::max<std::size_t>(2, batch_size_ / 4);
  std::vector<std::vector<std::size_t>> out;
  while (true) {
    std::size_t busiest = 0;
    std::size_t most = 0;
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      const std::size_t remaining = queues[c].size() - next[c];
      if (remaining > most) {
        most = remaining;
        busiest = c;
      }
    }
    if (most == 0) break;
    std::vector<std::size_t> candidates;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      if (std::find(blocks_[b].begin(), blocks_[b].end(), busiest) != blocks_[b].end()) candidates.push_back(b);
    }
    const auto& block = blocks_[candidates[static_cast<std::size_t>(rng_.below(candidates.size()))]];
    std::vector<std::size_t> batch;
    for (std::size_t c : block) {
      const std::size_t take = std::min(slots, queues[c].size() - next[c]);
      std::vector<std::size_t> taken(queues[c].begin() + static_cast<std::ptrdiff_t>(next[c]),
                                     queues[c].begin() + static_cast<std::ptrdiff_t>(next[c] + take));
      next[c] += take;
      batch.insert(batch.end(), taken.begin(), taken.end());
      top_up(cells_[c], 2, batch, taken);
    }
    std::sort(batch.begin(), batch.end());
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace poer
