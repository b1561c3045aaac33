#include "poer/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>

namespace poer {

namespace {

/// Reads keys out of one JSON object and rejects any left unread.
class Fields {
 public:
  Fields(const Json& doc, std::string where) : doc_(doc), where_(std::move(where)) {
    if (!doc_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  bool has(const char* key) const { return doc_.contains(key); }

  const Json& raw(const char* key) {
    seen_.insert(key);
    return doc_.at(key);
  }

  void read(const char* key, double& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_number()) fail(key, "a number");
    out = v.get<double>();
  }

  void read(const char* key, int& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_number_integer()) fail(key, "an integer");
    const auto n = v.get<std::int64_t>();
    if (n < std::numeric_limits<int>::min() || n > std::numeric_limits<int>::max()) fail(key, "an int");
    out = static_cast<int>(n);
  }

  void read(const char* key, std::uint64_t& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_number_unsigned()) fail(key, "a non-negative integer");
    out = v.get<std::uint64_t>();
  }

  void read(const char* key, bool& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_boolean()) fail(key, "a boolean");
    out = v.get<bool>();
  }

  void read(const char* key, std::string& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_string()) fail(key, "a string");
    out = v.get<std::string>();
  }

  void read(const char* key, std::vector<std::size_t>& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_array()) fail(key, "an array of non-negative integers");
    std::vector<std::size_t> values;
    for (const auto& e : v) {
      if (!e.is_number_unsigned()) fail(key, "an array of non-negative integers");
      values.push_back(e.get<std::size_t>());
    }
    out = std::move(values);
  }

  void read_size(const char* key, std::size_t& out) {
    std::uint64_t v = out;
    read(key, v);
    out = static_cast<std::size_t>(v);
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (auto it = doc_.begin(); it != doc_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key \"" + it.key() + "\"");
    }
  }

 private:
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw ConfigError(where_ + "." + key + ": expected " + what);
  }

  const Json& doc_;
  std::string where_;
  std::set<std::string> seen_;
};

Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const Json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected a matrix");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw ConfigError(where + ": ragged matrix");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      const Json& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) throw ConfigError(where + ": non-numeric entry");
      m(r, c) = v.get<double>();
    }
  }
  return m;
}

Json rng_to_json(const CounterRng::State& s) {
  return Json{{"key", s.key}, {"counter", s.counter}, {"has_spare", s.has_spare}, {"spare", s.spare}};
}

CounterRng::State rng_from_json(const Json& j) {
  Fields f(j, "rng");
  CounterRng::State s;
  f.read("key", s.key);
  f.read("counter", s.counter);
  f.read("has_spare", s.has_spare);
  f.read("spare", s.spare);
  f.finish();
  return s;
}

Json shape_to_json(const ModelShape& shape) {
  return Json{{"input_dim", shape.extractor.input_dim},
              {"block_dims", shape.extractor.block_dims},
              {"nonlinearity", to_string(shape.extractor.nonlinearity)},
              {"classes", shape.classes},
              {"prototypes_per_class", shape.prototypes_per_class}};
}

ModelShape shape_from_json(const Json& j) {
  Fields f(j, "shape");
  ModelShape s;
  f.read_size("input_dim", s.extractor.input_dim);
  f.read("block_dims", s.extractor.block_dims);
  std::string nl = to_string(s.extractor.nonlinearity);
  f.read("nonlinearity", nl);
  s.extractor.nonlinearity = nonlinearity_from_string(nl);
  f.read_size("classes", s.classes);
  f.read_size("prototypes_per_class", s.prototypes_per_class);
  f.finish();
  s.validate();
  return s;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_doubles(std::string& out, const std::vector<double>& values) {
  for (double v : values) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)]))
           << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::vector<double> doubles(std::size_t n) {
    if (n > (bytes_.size() - pos_) / 8) throw IoError("checkpoint: truncated tensor data");
    std::vector<double> v(n);
    for (auto& x : v) x = std::bit_cast<double>(uint(8));
    return v;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint: truncated file");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

constexpr char kMagic[] = "POERCKPT";

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path);
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace

Json to_json(const DatasetSpec& spec) {
  Json j;
  j["K"] = spec.categories;
  j["D"] = spec.domains;
  j["q"] = spec.signal_dim;
  j["r"] = spec.nuisance_dim;
  j["p"] = spec.observed_dim;
  j["sigma"] = spec.sigma;
  j["rho"] = spec.rho;
  j["clean_domain"] = spec.clean_domain ? Json(*spec.clean_domain) : Json(nullptr);
  j["N"] = spec.samples_per_cell;
  j["seed"] = spec.seed;
  j["tau_s"] = spec.tau_signal;
  j["tau_u"] = spec.tau_nuisance;
  j["tau_d"] = spec.tau_domain;
  j["identity_mixing"] = spec.identity_mixing;
  return j;
}

DatasetSpec dataset_spec_from_json(const Json& doc, DatasetSpec base) {
  Fields f(doc, "dataset");
  f.read("K", base.categories);
  f.read("D", base.domains);
  f.read("q", base.signal_dim);
  f.read("r", base.nuisance_dim);
  f.read("p", base.observed_dim);
  f.read("sigma", base.sigma);
  f.read("rho", base.rho);
  if (f.has("clean_domain")) {
    const Json& v = f.raw("clean_domain");
    if (v.is_null()) {
      base.clean_domain.reset();
    } else if (v.is_number_integer()) {
      base.clean_domain = v.get<int>();
    } else {
      throw ConfigError("dataset.clean_domain: expected an integer or null");
    }
  }
  f.read("N", base.samples_per_cell);
  f.read("seed", base.seed);
  f.read("tau_s", base.tau_signal);
  f.read("tau_u", base.tau_nuisance);
  f.read("tau_d", base.tau_domain);
  f.read("identity_mixing", base.identity_mixing);
  f.finish();
  return base;
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["alpha_early"] = c.alpha_early;
  j["alpha_late"] = c.alpha_late;
  j["alpha_switch_epoch"] = c.alpha_switch_epoch;
  j["seed"] = c.seed;
  j["target_domain"] = c.target_domain;
  j["val_fraction"] = c.val_fraction;
  j["prototypes_per_class"] = c.prototypes_per_class;
  j["burn_in_fraction"] = c.burn_in_fraction;
  j["extractor"] = Json{{"input_dim", c.extractor.input_dim},
                        {"block_dims", c.extractor.block_dims},
                        {"nonlinearity", to_string(c.extractor.nonlinearity)}};
  j["loss"] = Json{{"margin", c.loss.margin},
                   {"beta", c.loss.beta},
                   {"clamp", c.loss.clamp},
                   {"rank_blocks", c.loss.rank_blocks},
                   {"cluster_blocks", c.loss.cluster_blocks},
                   {"rank", c.terms.rank},
                   {"cluster", c.terms.cluster}};
  j["optimizer"] = Json{{"learning_rate", c.optimizer.learning_rate},
                        {"beta1", c.optimizer.beta1},
                        {"beta2", c.optimizer.beta2},
                        {"epsilon", c.optimizer.epsilon},
                        {"weight_decay", c.optimizer.weight_decay},
                        {"lr_half_life", c.optimizer.lr_half_life}};
  return j;
}

TrainConfig train_config_from_json(const Json& doc, TrainConfig c) {
  Fields f(doc, "train");
  f.read_size("epochs", c.epochs);
  f.read_size("batch_size", c.batch_size);
  f.read("alpha_early", c.alpha_early);
  f.read("alpha_late", c.alpha_late);
  f.read_size("alpha_switch_epoch", c.alpha_switch_epoch);
  f.read("seed", c.seed);
  f.read("target_domain", c.target_domain);
  f.read("val_fraction", c.val_fraction);
  f.read_size("prototypes_per_class", c.prototypes_per_class);
  f.read("burn_in_fraction", c.burn_in_fraction);
  if (f.has("extractor")) {
    Fields e(f.raw("extractor"), f.path("extractor"));
    e.read_size("input_dim", c.extractor.input_dim);
    e.read("block_dims", c.extractor.block_dims);
    std::string nl = to_string(c.extractor.nonlinearity);
    e.read("nonlinearity", nl);
    try {
      c.extractor.nonlinearity = nonlinearity_from_string(nl);
    } catch (const std::invalid_argument& ex) {
      throw ConfigError(e.path("nonlinearity") + ": " + ex.what());
    }
    e.finish();
  }
  if (f.has("loss")) {
    Fields l(f.raw("loss"), f.path("loss"));
    l.read("margin", c.loss.margin);
    l.read("beta", c.loss.beta);
    l.read("clamp", c.loss.clamp);
    l.read("rank_blocks", c.loss.rank_blocks);
    l.read("cluster_blocks", c.loss.cluster_blocks);
    l.read("rank", c.terms.rank);
    l.read("cluster", c.terms.cluster);
    l.finish();
  }
  if (f.has("optimizer")) {
    Fields o(f.raw("optimizer"), f.path("optimizer"));
    o.read("learning_rate", c.optimizer.learning_rate);
    o.read("beta1", c.optimizer.beta1);
    o.read("beta2", c.optimizer.beta2);
    o.read("epsilon", c.optimizer.epsilon);
    o.read("weight_decay", c.optimizer.weight_decay);
    o.read_size("lr_half_life", c.optimizer.lr_half_life);
    o.finish();
  }
  f.finish();
  return c;
}

ExperimentConfig experiment_from_json(const Json& doc) {
  Fields f(doc, "config");
  ExperimentConfig c;
  if (f.has("dataset")) c.dataset = dataset_spec_from_json(f.raw("dataset"), c.dataset);
  if (f.has("train")) c.train = train_config_from_json(f.raw("train"), c.train);
  if (f.has("paths")) {
    Fields p(f.raw("paths"), "paths");
    p.read("data", c.paths.data);
    p.read("metadata", c.paths.metadata);
    p.read("checkpoint", c.paths.checkpoint);
    p.read("metrics", c.paths.metrics);
    p.finish();
  }
  f.finish();
  return c;
}

Json to_json(const ExperimentConfig& c) {
  return Json{{"dataset", to_json(c.dataset)},
              {"train", to_json(c.train)},
              {"paths", Json{{"data", c.paths.data},
                             {"metadata", c.paths.metadata},
                             {"checkpoint", c.paths.checkpoint},
                             {"metrics", c.paths.metrics}}}};
}

Json read_json_file(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path + ": malformed JSON: " + e.what());
  }
}

void write_json_file(const std::string& path, const Json& doc) {
  write_file(path, doc.dump(2) + "\n");
}

void write_dataset(const Dataset& data, const std::string& records_path,
                   const std::string& metadata_path) {
  std::string records;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < data.x.cols(); ++c) row.push_back(data.x(static_cast<Eigen::Index>(i), c));
    records += Json{{"x", std::move(row)}, {"y", data.y[i]}, {"d", data.d[i]}}.dump();
    records += '\n';
  }
  write_file(records_path, records);
  Json meta;
  meta["spec"] = to_json(data.spec);
  meta["category_templates"] = matrix_to_json(data.meta.category_templates);
  meta["category_nuisance"] = matrix_to_json(data.meta.category_nuisance);
  meta["domain_embeddings"] = matrix_to_json(data.meta.domain_embeddings);
  meta["mixing"] = matrix_to_json(data.meta.mixing);
  write_json_file(metadata_path, meta);
}

Dataset read_dataset(const std::string& records_path, const std::string& metadata_path) {
  const Json meta = read_json_file(metadata_path);
  Fields f(meta, "metadata");
  Dataset data;
  if (!f.has("spec")) throw ConfigError("metadata: missing \"spec\"");
  data.spec = dataset_spec_from_json(f.raw("spec"));
  data.spec.validate();
  for (const char* key : {"category_templates", "category_nuisance", "domain_embeddings", "mixing"}) {
    if (!f.has(key)) throw ConfigError(std::string("metadata: missing \"") + key + "\"");
  }
  data.meta.category_templates = matrix_from_json(f.raw("category_templates"), "metadata.category_templates");
  data.meta.category_nuisance = matrix_from_json(f.raw("category_nuisance"), "metadata.category_nuisance");
  data.meta.domain_embeddings = matrix_from_json(f.raw("domain_embeddings"), "metadata.domain_embeddings");
  data.meta.mixing = matrix_from_json(f.raw("mixing"), "metadata.mixing");
  f.finish();

  std::istringstream in(read_file(records_path));
  std::vector<double> flat;
  const auto p = static_cast<std::size_t>(data.spec.observed_dim);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = records_path + ":" + std::to_string(line_no);
    Json rec;
    try {
      rec = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw ConfigError(where + ": malformed record: " + e.what());
    }
    Fields r(rec, where);
    if (!r.has("x") || !r.has("y") || !r.has("d")) throw ConfigError(where + ": record needs x, y and d");
    const Json& x = r.raw("x");
    if (!x.is_array() || x.size() != p) {
      throw ConfigError(where + ": x must hold " + std::to_string(p) + " numbers");
    }
    for (const auto& v : x) {
      if (!v.is_number()) throw ConfigError(where + ": x must hold numbers");
      flat.push_back(v.get<double>());
    }
    int y = 0;
    int d = 0;
    r.read("y", y);
    r.read("d", d);
    r.finish();
    if (y < 0 || y >= data.spec.categories) throw ConfigError(where + ": y out of range");
    if (d < 0 || d >= data.spec.domains) throw ConfigError(where + ": d out of range");
    data.y.push_back(y);
    data.d.push_back(d);
  }
  data.x = Eigen::Map<const Matrix>(flat.data(), static_cast<Eigen::Index>(data.y.size()),
                                    static_cast<Eigen::Index>(p));
  return data;
}

std::string serialize_checkpoint(const Checkpoint& ck) {
  const std::size_t n = ck.state.params.size();
  if (ck.state.optimizer.first_moment.size() != n || ck.state.optimizer.second_moment.size() != n) {
    throw std::invalid_argument("checkpoint: optimizer moments do not match the parameter count");
  }
  Json header;
  header["config"] = to_json(ck.config);
  header["shape"] = shape_to_json(ck.state.shape);
  header["rng"] = rng_to_json(ck.rng);
  header["best_val_accuracy"] = ck.best_val_accuracy;
  header["best_epoch"] = ck.best_epoch;
  header["optimizer_step"] = ck.state.optimizer.step;
  header["num_params"] = n;
  const std::string text = header.dump();

  std::string out(kMagic, 8);
  put_u32(out, Checkpoint::kFormatVersion);
  put_u64(out, text.size());
  out += text;
  put_doubles(out, ck.state.params);
  put_doubles(out, ck.state.optimizer.first_moment);
  put_doubles(out, ck.state.optimizer.second_moment);
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  ByteReader r(bytes);
  if (r.take(8) != std::string(kMagic, 8)) throw IoError("checkpoint: bad magic");
  const auto version = static_cast<std::uint32_t>(r.uint(4));
  if (version != Checkpoint::kFormatVersion) {
    throw VersionMismatchError("checkpoint format version " + std::to_string(version) + ", expected " +
                               std::to_string(Checkpoint::kFormatVersion));
  }
  const std::uint64_t header_len = r.uint(8);
  if (header_len > bytes.size()) throw IoError("checkpoint: truncated header");
  Json header;
  try {
    header = Json::parse(r.take(static_cast<std::size_t>(header_len)));
  } catch (const Json::parse_error& e) {
    throw IoError(std::string("checkpoint: corrupt header: ") + e.what());
  }
  Checkpoint ck;
  try {
    Fields f(header, "checkpoint");
    ck.config = train_config_from_json(f.raw("config"));
    ck.state.shape = shape_from_json(f.raw("shape"));
    ck.rng = rng_from_json(f.raw("rng"));
    f.read("best_val_accuracy", ck.best_val_accuracy);
    f.read_size("best_epoch", ck.best_epoch);
    f.read("optimizer_step", ck.state.optimizer.step);
    std::size_t n = 0;
    f.read_size("num_params", n);
    f.finish();
    if (n != ParameterLayout(ck.state.shape).total()) {
      throw IoError("checkpoint: parameter count does not match the model shape");
    }
    ck.state.params = r.doubles(n);
    ck.state.optimizer.first_moment = r.doubles(n);
    ck.state.optimizer.second_moment = r.doubles(n);
  } catch (const Json::exception& e) {
    throw IoError(std::string("checkpoint: corrupt header: ") + e.what());
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint: corrupt header: ") + e.what());
  }
  if (!r.done()) throw IoError("checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  write_file(path, serialize_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

Json to_json(const EvalResult& eval) {
  Json per = Json::array();
  for (const auto& d : eval.per_domain) {
    per.push_back(Json{{"domain", d.domain}, {"count", d.count}, {"correct", d.correct}, {"accuracy", d.accuracy}});
  }
  return Json{{"accuracy", eval.accuracy}, {"count", eval.count}, {"correct", eval.correct}, {"per_domain", per}};
}

Json metrics_to_json(const MetricsReport& m, const TrainConfig& config) {
  Json curves = Json::array();
  for (std::size_t e = 0; e < m.epochs.size(); ++e) {
    const EpochRecord& r = m.epochs[e];
    curves.push_back(Json{{"epoch", e},
                          {"learning_rate", r.learning_rate},
                          {"alpha", r.alpha},
                          {"total", r.total},
                          {"cls", r.cls},
                          {"rank", r.rank},
                          {"cluster", r.cluster},
                          {"train_accuracy", r.train_accuracy},
                          {"val_accuracy", r.val_accuracy}});
  }
  Json j;
  j["seed"] = m.seed;
  j["target_domain"] = m.target_domain;
  j["target"] = to_json(m.target);
  j["validation"] = to_json(m.validation);
  j["mean_domain_accuracy"] = m.mean_domain_accuracy;
  j["selected_epoch"] = m.selected_epoch;
  j["best_val_accuracy"] = m.best_val_accuracy;
  j["poer_gradient_steps"] = m.poer_gradient_steps;
  j["epochs"] = std::move(curves);
  j["batch_losses"] = m.batch_losses;
  j["config"] = to_json(config);
  return j;
}

void write_embeddings_csv(const std::vector<EmbeddingRow>& rows, const std::string& path) {
  std::ostringstream out;
  out.precision(17);
  out << "pc1,pc2,category,domain\n";
  for (const auto& r : rows) out << r.pc1 << ',' << r.pc2 << ',' << r.category << ',' << r.domain << '\n';
  write_file(path, out.str());
}

}  // namespace poer
