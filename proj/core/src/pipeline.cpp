#include "gdnsq/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "gdnsq/errors.hpp"

namespace gdnsq {

using nlohmann::json;

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348554646000000ULL;
constexpr std::uint64_t kNoiseStream = 0x4e4f495345ULL;

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

std::string phase_name(LrPhase p) { return p == LrPhase::constant ? "constant" : "annealing"; }

LrPhase parse_phase(const std::string& s) {
  if (s == "constant") return LrPhase::constant;
  if (s == "annealing") return LrPhase::annealing;
  throw FormatError("unknown phase '" + s + "' in metrics", 0);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t bits_for_levels(std::size_t levels) {
  std::size_t b = 0;
  while ((std::size_t{1} << b) < levels) ++b;
  return b;
}

double mean_of(const std::vector<SiteBits>& sites, double SiteBits::*field) {
  if (sites.empty()) return 0.0;
  double s = 0.0;
  for (const auto& site : sites) s += site.*field;
  return s / static_cast<double>(sites.size());
}

double max_actual(const std::vector<SiteBits>& sites) {
  double m = 0.0;
  for (const auto& site : sites) m = std::max(m, site.actual);
  return m;
}

// Collects per-site statistics from the quantized layers' inputs.
class RangeObserver : public ActivationObserver {
 public:
  explicit RangeObserver(std::size_t sites)
      : lo_(sites, std::numeric_limits<double>::infinity()), hi_(sites, -std::numeric_limits<double>::infinity()) {}

  void observe(std::size_t site, std::span<const double> pre, std::span<const double>) override {
    for (double v : pre) {
      lo_[site] = std::min(lo_[site], v);
      hi_[site] = std::max(hi_[site], v);
    }
  }

  std::vector<double> lo_, hi_;
};

class LevelObserver : public ActivationObserver {
 public:
  explicit LevelObserver(std::vector<const FakeQuantizer*> quantizers)
      : quantizers_(std::move(quantizers)), levels_(quantizers_.size()) {}

  void observe(std::size_t site, std::span<const double> pre, std::span<const double>) override {
    for (auto k : quantizers_[site]->quantize_levels(pre)) levels_[site].insert(k);
  }

  std::vector<const FakeQuantizer*> quantizers_;
  std::vector<std::set<std::int64_t>> levels_;
};

}  // namespace

// ---- data ---------------------------------------------------------------------

DataSource DataSource::parse(const std::string& text) {
  DataSource src;
  if (text.rfind("idx:", 0) == 0) {
    const auto rest = text.substr(4);
    const auto colon = rest.find(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == rest.size()) {
      throw DomainError("idx data source must look like idx:<images>:<labels>");
    }
    src.kind = "idx";
    src.images = rest.substr(0, colon);
    src.labels = rest.substr(colon + 1);
    return src;
  }
  parse_synthetic_kind(text);
  src.kind = text;
  return src;
}

std::string DataSource::describe() const { return kind == "idx" ? "idx:" + images + ":" + labels : kind; }

namespace {

json data_to_json(const DataSource& d) {
  return {{"kind", d.kind},     {"seed", d.seed},     {"n_train", d.n_train},          {"n_val", d.n_val},
          {"images", d.images}, {"labels", d.labels}, {"val_fraction", d.val_fraction}};
}

void data_from_json(const json& j, DataSource& d, const std::string& prefix) {
  for (const auto& [k, v] : j.items()) {
    if (k == "kind") d.kind = v.get<std::string>();
    else if (k == "seed") d.seed = v.get<std::uint64_t>();
    else if (k == "n_train") d.n_train = v.get<std::size_t>();
    else if (k == "n_val") d.n_val = v.get<std::size_t>();
    else if (k == "images") d.images = v.get<std::string>();
    else if (k == "labels") d.labels = v.get<std::string>();
    else if (k == "val_fraction") d.val_fraction = v.get<double>();
    else throw DomainError("unknown config key '" + prefix + k + "'");
  }
}

}  // namespace

std::string DataSource::to_json() const { return data_to_json(*this).dump(); }

DataSource DataSource::from_json(const std::string& text) {
  DataSource d;
  try {
    data_from_json(json::parse(text), d, "");
  } catch (const json::exception& e) {
    throw DomainError(std::string("malformed data source: ") + e.what());
  }
  return d;
}

DataSplits load_data(const DataSource& source) {
  if (source.kind == "idx") {
    auto [train, val] = split_dataset(load_idx_dataset(source.images, source.labels), source.val_fraction);
    return {std::move(train), std::move(val)};
  }
  const auto kind = parse_synthetic_kind(source.kind);
  return {make_synthetic(kind, source.n_train, source.seed, Split::train),
          make_synthetic(kind, source.n_val, source.seed, Split::val)};
}

// ---- RunConfig ----------------------------------------------------------------

void RunConfig::validate() const {
  if (!(targets.weights >= 1.0) || !(targets.activations >= 1.0)) throw DomainError("bit-width targets must be >= 1");
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw DomainError("lr0 must be positive");
  if (!(anneal_alpha > 0.0 && anneal_alpha <= 1.0)) throw DomainError("annealing factor must be in (0, 1]");
  if (batch_size < 2) throw DomainError("batch size must be at least 2");
  if (!(initial_t_q >= 0.0) || !std::isfinite(initial_t_q)) throw DomainError("initial t_q must be non-negative");
}

std::string RunConfig::to_json() const {
  json j;
  j["model"] = model;
  j["data"] = data_to_json(data);
  j["wbits"] = targets.weights;
  j["abits"] = targets.activations;
  j["lr0"] = lr0;
  j["anneal_alpha"] = anneal_alpha;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["noise_mode"] = to_string(noise_mode);
  j["batchnorm_frozen"] = batchnorm_frozen;
  j["distill"] = to_string(distill);
  j["ptq_enabled"] = ptq_enabled;
  j["seed"] = seed;
  j["initial_t_q"] = initial_t_q;
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) { return from_json(text, RunConfig{}); }

RunConfig RunConfig::from_json(const std::string& text, const RunConfig& base) {
  RunConfig c = base;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DomainError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw DomainError("config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "model") c.model = v.get<std::string>();
      else if (key == "wbits") c.targets.weights = v.get<double>();
      else if (key == "abits") c.targets.activations = v.get<double>();
      else if (key == "lr0") c.lr0 = v.get<double>();
      else if (key == "anneal_alpha") c.anneal_alpha = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "noise_mode") c.noise_mode = parse_noise_mode(v.get<std::string>());
      else if (key == "batchnorm_frozen") c.batchnorm_frozen = v.get<bool>();
      else if (key == "distill") c.distill = parse_distill_loss(v.get<std::string>());
      else if (key == "ptq_enabled") c.ptq_enabled = v.get<bool>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "initial_t_q") c.initial_t_q = v.get<double>();
      else if (key == "data") {
        if (v.is_string()) {
          const auto parsed = DataSource::parse(v.get<std::string>());
          c.data.kind = parsed.kind;
          c.data.images = parsed.images;
          c.data.labels = parsed.labels;
          continue;
        }
        data_from_json(v, c.data, "data.");
      } else {
        throw DomainError("unknown config key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw DomainError(std::string("config has a field of the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

std::uint64_t RunConfig::hash() const {
  const auto text = to_json();
  return fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---- teacher --------------------------------------------------------------------

TeacherResult train_teacher(const TeacherOptions& options, const Dataset& train, const Dataset& val) {
  Model model(builtin_model(options.model, train.sample_shape, train.num_classes), false, options.seed);
  RAdam optimizer(model.parameters());
  TeacherResult result{Model(builtin_model(options.model, train.sample_shape, train.num_classes), false, 0), 0.0, {}};
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    Rng shuffle = Rng::derived(options.seed, kShuffleStream + epoch);
    const auto order = permutation(train.size(), shuffle);
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& idx : make_batches(order, options.batch_size)) {
      Tensor logits = model.forward(train.batch_inputs(idx), {Mode::train});
      const auto labels = train.batch_labels(idx);
      Tensor loss = hard_cross_entropy(logits, labels);
      if (!std::isfinite(loss.item())) {
        throw NumericError("teacher loss diverged at epoch " + std::to_string(epoch), count);
      }
      optimizer.zero_grad();
      loss.backward();
      optimizer.step(options.lr);
      total += loss.item();
      ++count;
    }
    result.epoch_losses.push_back(count ? total / static_cast<double>(count) : 0.0);
  }
  result.val_accuracy = accuracy(model, val.all_inputs(), val.labels);
  result.model = std::move(model);
  return result;
}

// ---- quantizer initialization ---------------------------------------------------

void ptq_minmax(Model& student, const Dataset& data, std::size_t batch_size) {
  if (!student.quantized()) throw ContractError("PTQ needs a quantized student");
  const auto indices = student.quantized_layer_indices();
  auto& layers = student.layers();
  for (auto i : indices) {
    auto w = layers[i].weight.data();
    const auto [lo, hi] = std::minmax_element(w.begin(), w.end());
    if (!(*lo < *hi)) throw DomainError("degenerate weight range at site L" + std::to_string(i) + ".w");
    layers[i].weight_quantizer->set_range(*lo, *hi, kPtqBits);
  }
  RangeObserver observer(indices.size());
  {
    NoGradGuard no_grad;
    const Tensor inputs = data.all_inputs();
    const std::size_t n = data.size();
    for (std::size_t b = 0; b < n; b += batch_size) {
      std::vector<std::size_t> idx;
      for (std::size_t k = b; k < std::min(n, b + batch_size); ++k) idx.push_back(k);
      ForwardOptions opts;
      opts.mode = Mode::eval;
      opts.bypass_quantizers = true;
      opts.observer = &observer;
      student.forward(data.batch_inputs(idx), opts);
    }
  }
  for (std::size_t site = 0; site < indices.size(); ++site) {
    auto& q = *layers[indices[site]].activation_quantizer;
    const std::string name = "L" + std::to_string(indices[site]) + ".a";
    const double lo = q.bounds_mode() == BoundsMode::fixed_lower ? q.lower_value() : observer.lo_[site];
    const double hi = observer.hi_[site];
    if (!(lo < hi)) throw DomainError("degenerate activation range at site " + name);
    q.set_range(lo, hi, kPtqBits);
  }
  for (auto i : indices) {
    layers[i].weight_quantizer->mark_initialized();
    layers[i].activation_quantizer->mark_initialized();
  }
}

void init_quantizers_default(Model& student) {
  if (!student.quantized()) throw ContractError("quantizer initialization needs a quantized student");
  for (auto* q : student.weight_quantizers()) {
    q->set_range(-1.0, 1.0, kPtqBits);
    q->mark_initialized();
  }
  for (auto* q : student.activation_quantizers()) {
    q->set_range(q->bounds_mode() == BoundsMode::fixed_lower ? q->lower_value() : -1.0, 1.0, kPtqBits);
    q->mark_initialized();
  }
}

// ---- audit ----------------------------------------------------------------------

void BitWidthReport::print(std::ostream& out) const {
  char line[160];
  auto emit = [&](const SiteBits& s) {
    std::snprintf(line, sizeof line, "  %-8s estimated %7.3f  levels %6zu  actual %4.0f\n", s.name.c_str(), s.estimated,
                  s.levels, s.actual);
    out << line;
  };
  out << "weights:\n";
  for (const auto& s : weights) emit(s);
  out << "activations:\n";
  for (const auto& s : activations) emit(s);
  std::snprintf(line, sizeof line, "weights     mean estimated %.3f  mean actual %.3f  max actual %.0f\n", mean_w_est,
                mean_w_act, max_w_act);
  out << line;
  std::snprintf(line, sizeof line, "activations mean estimated %.3f  mean actual %.3f  max actual %.0f\n", mean_a_est,
                mean_a_act, max_a_act);
  out << line;
  for (const auto& w : warnings) out << "warning: " << w << "\n";
}

BitWidthReport audit_bitwidth(Model& model, const Dataset& data, std::size_t batch_size) {
  if (!model.quantized()) throw ContractError("audit needs a quantized model");
  BitWidthReport report;
  const auto indices = model.quantized_layer_indices();
  const auto aqs = std::as_const(model).activation_quantizers();
  LevelObserver observer(aqs);
  {
    NoGradGuard no_grad;
    const std::size_t n = data.size();
    for (std::size_t b = 0; b < n; b += batch_size) {
      std::vector<std::size_t> idx;
      for (std::size_t k = b; k < std::min(n, b + batch_size); ++k) idx.push_back(k);
      ForwardOptions opts;
      opts.mode = Mode::eval;
      opts.observer = &observer;
      model.forward(data.batch_inputs(idx), opts);
    }
  }
  auto finish = [&](SiteBits& s) {
    s.actual = static_cast<double>(bits_for_levels(s.levels));
    if (s.levels <= 1) report.warnings.push_back("site " + s.name + " has collapsed to a single level");
  };
  for (std::size_t site = 0; site < indices.size(); ++site) {
    const Layer& layer = model.layers()[indices[site]];
    SiteBits w;
    w.name = "L" + std::to_string(indices[site]) + ".w";
    w.kind = SiteKind::weight;
    w.estimated = layer.weight_quantizer->bitwidth_value();
    const auto levels = layer.weight_quantizer->quantize_levels(layer.weight.data());
    w.levels = std::set<std::int64_t>(levels.begin(), levels.end()).size();
    finish(w);
    report.weights.push_back(w);

    SiteBits a;
    a.name = "L" + std::to_string(indices[site]) + ".a";
    a.kind = SiteKind::activation;
    a.estimated = layer.activation_quantizer->bitwidth_value();
    a.levels = observer.levels_[site].size();
    finish(a);
    report.activations.push_back(a);
  }
  report.mean_w_est = mean_of(report.weights, &SiteBits::estimated);
  report.mean_w_act = mean_of(report.weights, &SiteBits::actual);
  report.max_w_act = max_actual(report.weights);
  report.mean_a_est = mean_of(report.activations, &SiteBits::estimated);
  report.mean_a_act = mean_of(report.activations, &SiteBits::actual);
  report.max_a_act = max_actual(report.activations);
  return report;
}

// ---- metrics --------------------------------------------------------------------

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << kMetricsHeader << "\n";
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  for (const auto& r : rows) {
    out << r.step << ',' << phase_name(r.phase) << ',' << fmt(r.lambda) << ',' << fmt(r.t_q) << ',' << fmt(r.c_r)
        << ',' << opt(r.loss) << ',' << opt(r.distill_d) << ',' << opt(r.potential_p) << ',' << opt(r.val_acc) << ','
        << opt(r.mean_w_est) << ',' << opt(r.mean_w_act) << ',' << opt(r.max_w_act) << ',' << opt(r.mean_a_est)
        << ',' << opt(r.mean_a_act) << ',' << opt(r.max_a_act) << "\n";
  }
}

std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw FormatError("metrics CSV header mismatch", 0);
  std::vector<MetricsRow> rows;
  std::size_t offset = line.size() + 1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 15) throw FormatError("metrics row has " + std::to_string(f.size()) + " fields", offset);
    auto num = [&](const std::string& s) {
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (end == s.c_str() || *end != '\0') throw FormatError("bad number '" + s + "' in metrics", offset);
      return v;
    };
    auto opt = [&](const std::string& s) { return s.empty() ? std::optional<double>() : std::optional<double>(num(s)); };
    MetricsRow r;
    r.step = std::stoull(f[0]);
    r.phase = parse_phase(f[1]);
    r.lambda = num(f[2]);
    r.t_q = num(f[3]);
    r.c_r = num(f[4]);
    r.loss = opt(f[5]);
    r.distill_d = opt(f[6]);
    r.potential_p = opt(f[7]);
    r.val_acc = opt(f[8]);
    r.mean_w_est = opt(f[9]);
    r.mean_w_act = opt(f[10]);
    r.max_w_act = opt(f[11]);
    r.mean_a_est = opt(f[12]);
    r.mean_a_act = opt(f[13]);
    r.max_a_act = opt(f[14]);
    rows.push_back(r);
    offset += line.size() + 1;
  }
  return rows;
}

std::string metrics_to_json(const std::vector<MetricsRow>& rows) {
  json arr = json::array();
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  for (const auto& r : rows) {
    arr.push_back({{"step", r.step},
                   {"phase", phase_name(r.phase)},
                   {"lambda", r.lambda},
                   {"t_q", r.t_q},
                   {"c_r", r.c_r},
                   {"loss", opt(r.loss)},
                   {"distill_d", opt(r.distill_d)},
                   {"potential_P", opt(r.potential_p)},
                   {"val_acc", opt(r.val_acc)},
                   {"mean_w_est", opt(r.mean_w_est)},
                   {"mean_w_act", opt(r.mean_w_act)},
                   {"max_w_act", opt(r.max_w_act)},
                   {"mean_a_est", opt(r.mean_a_est)},
                   {"mean_a_act", opt(r.mean_a_act)},
                   {"max_a_act", opt(r.max_a_act)}});
  }
  return arr.dump(1);
}

// ---- QatRunner ------------------------------------------------------------------

QatRunner::QatRunner(RunConfig config, Model teacher, Model student, Dataset train, Dataset val)
    : config_(std::move(config)),
      teacher_(std::move(teacher)),
      student_(std::move(student)),
      train_(std::move(train)),
      val_(std::move(val)),
      val_inputs_(val_.all_inputs()),
      optimizer_(student_.parameters()),
      lr_policy_(make_lr_policy(config_.lr0, config_.anneal_alpha)),
      rng_(Rng::derived(config_.seed, kNoiseStream)) {
  config_.validate();
  if (!student_.quantized()) throw ContractError("QAT needs a quantized student");
  if (!student_.quantizers_initialized()) {
    throw ContractError("student quantizers were never initialized; run PTQ or an explicit initialization first");
  }
  if (train_.sample_shape != student_.spec().input_shape || val_.sample_shape != student_.spec().input_shape) {
    throw DimensionError("dataset sample shape does not match the model input");
  }
  student_.set_noise_mode(config_.noise_mode);
  student_.set_batchnorm_frozen(config_.batchnorm_frozen);
  loss_state_.initial_t_q = config_.initial_t_q;
  loss_state_.t_q = config_.initial_t_q;
  loss_state_.targets = config_.targets;
  summary_.teacher_accuracy = accuracy(teacher_, val_inputs_, val_.labels);
}

void QatRunner::prepare_epoch() {
  if (batches_epoch_ == epoch_) return;
  Rng shuffle = Rng::derived(config_.seed, kShuffleStream + epoch_);
  batches_ = make_batches(permutation(train_.size(), shuffle), config_.batch_size);
  if (batches_.empty()) throw DomainError("training set too small for one batch");
  batches_epoch_ = epoch_;
}

StepResult QatRunner::step() {
  if (finished()) throw ContractError("QAT run already finished");
  prepare_epoch();
  const auto& idx = batches_[batch_in_epoch_];
  const Tensor x = train_.batch_inputs(idx);
  const auto labels = train_.batch_labels(idx);

  std::vector<double> teacher_logits;
  if (config_.distill != DistillLoss::hard_label_ce) {
    NoGradGuard no_grad;
    Tensor t = teacher_.forward(x, {Mode::eval});
    teacher_logits.assign(t.data().begin(), t.data().end());
  }

  ForwardOptions opts;
  opts.mode = Mode::train;
  opts.rng = &rng_;
  Tensor logits = student_.forward(x, opts);
  LossTerms terms = total_loss(logits, teacher_logits, labels, std::as_const(student_).weight_quantizers(),
                               std::as_const(student_).activation_quantizers(), loss_state_, config_.distill);
  StepResult result;
  result.loss = terms.total.item();
  result.distance = terms.distance.item();
  result.potential = terms.potential.item();
  result.lambda = lr_policy_.current;
  if (!std::isfinite(result.loss)) {
    throw NumericError("QAT loss became non-finite at step " + std::to_string(loss_state_.step), loss_state_.step);
  }
  optimizer_.zero_grad();
  terms.total.backward();
  optimizer_.step(lr_policy_.current);

  MetricsRow row;
  row.step = loss_state_.step;
  row.phase = lr_policy_.phase;
  row.lambda = lr_policy_.current;
  row.t_q = loss_state_.t_q;
  row.c_r = loss_state_.c_r;
  row.loss = result.loss;
  row.distill_d = result.distance;
  row.potential_p = result.potential;
  metrics_.push_back(row);

  const double next_lr = lr_next(lr_policy_, trigger_annealing_);
  trigger_annealing_ = false;
  const double previous_t_q = loss_state_.t_q;
  update_schedule(loss_state_, next_lr, result.distance);
  // t_q = lambda_n * n falls once the geometric decay outpaces n; reported once
  if (loss_state_.t_q < previous_t_q) {
    const std::string prefix = "t_q started decreasing";
    const bool logged = std::any_of(summary_.warnings.begin(), summary_.warnings.end(),
                                    [&](const std::string& w) { return w.rfind(prefix, 0) == 0; });
    if (!logged) summary_.warnings.push_back(prefix + " at step " + std::to_string(loss_state_.step));
  }

  ++batches_done_;
  summary_.batches = batches_done_;
  if (++batch_in_epoch_ == batches_.size()) {
    batch_in_epoch_ = 0;
    ++epoch_;
    audit();
    result.audited = true;
  }
  return result;
}

AuditResult QatRunner::audit() {
  AuditResult a;
  a.step = loss_state_.step;
  a.epoch = epoch_;
  a.report = audit_bitwidth(student_, val_);
  a.val_accuracy = accuracy(student_, val_inputs_, val_.labels);
  a.reached = a.report.reached(config_.targets);

  MetricsRow row;
  row.step = loss_state_.step;
  row.phase = lr_policy_.phase;
  row.lambda = lr_policy_.current;
  row.t_q = loss_state_.t_q;
  row.c_r = loss_state_.c_r;
  row.val_acc = a.val_accuracy;
  row.mean_w_est = a.report.mean_w_est;
  row.mean_w_act = a.report.mean_w_act;
  row.max_w_act = a.report.max_w_act;
  row.mean_a_est = a.report.mean_a_est;
  row.mean_a_act = a.report.mean_a_act;
  row.max_a_act = a.report.max_a_act;
  metrics_.push_back(row);

  if (a.reached && lr_policy_.phase == LrPhase::constant) trigger_annealing_ = true;
  if (last_max_w_ && (a.report.max_w_act > *last_max_w_ || a.report.max_a_act > *last_max_a_)) {
    summary_.warnings.push_back("max actual bit-width increased at step " + std::to_string(a.step));
  }
  last_max_w_ = a.report.max_w_act;
  last_max_a_ = a.report.max_a_act;

  ++summary_.audits;
  summary_.final_accuracy = a.val_accuracy;
  summary_.final_report = a.report;
  bool improved = false;
  if (a.reached) {
    if (!summary_.first_reached_step) {
      summary_.first_reached_step = a.step;
      summary_.first_reached_accuracy = a.val_accuracy;
    }
    if (!summary_.best_accuracy || a.val_accuracy > *summary_.best_accuracy) {
      summary_.best_accuracy = a.val_accuracy;
      improved = true;
    }
  }
  if (improved || out_dir_) {
    Checkpoint ckpt = checkpoint();
    if (out_dir_) ckpt.save(*out_dir_ / "last.ckpt");
    if (improved) {
      if (out_dir_) ckpt.save(*out_dir_ / "best.ckpt");
      best_ = std::move(ckpt);
    }
  }
  return a;
}

QatSummary QatRunner::run(const std::optional<std::filesystem::path>& out_dir) {
  out_dir_ = out_dir;
  if (out_dir_) std::filesystem::create_directories(*out_dir_);
  auto write_metrics = [&] {
    if (!out_dir_) return;
    std::ostringstream csv;
    write_metrics_csv(csv, metrics_);
    const auto text = csv.str();
    write_file_atomic(*out_dir_ / "metrics.csv",
                      std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  };
  try {
    while (!finished()) step();
  } catch (...) {
    write_metrics();
    throw;
  }
  write_metrics();
  if (out_dir_) checkpoint().save(*out_dir_ / "last.ckpt");
  return summary_;
}

Checkpoint QatRunner::checkpoint() const {
  Checkpoint ckpt;
  ckpt.put_text("meta/kind", "qat");
  ckpt.put_text("meta/config", config_.to_json());
  const std::uint64_t hash = config_.hash();
  ckpt.put_u64("meta/config_hash", std::span<const std::uint64_t>(&hash, 1));
  student_.save(ckpt, "model/");

  const auto& st = optimizer_.state();
  const std::uint64_t step = st.step;
  ckpt.put_u64("optim/step", std::span<const std::uint64_t>(&step, 1));
  const double hyper[3] = {st.beta1, st.beta2, st.eps};
  ckpt.put_f64("optim/hyper", hyper);
  const auto& params = optimizer_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    // moments are allocated on the first step
    const std::vector<double> zeros(params[i].tensor.numel(), 0.0);
    ckpt.put_f64("optim/m/" + params[i].name, st.m.empty() ? zeros : st.m[i]);
    ckpt.put_f64("optim/v/" + params[i].name, st.v.empty() ? zeros : st.v[i]);
  }

  const double loss[7] = {loss_state_.t_q,         loss_state_.t_r,       loss_state_.c_r,
                          loss_state_.c_r_sum,     loss_state_.initial_t_q, loss_state_.targets.weights,
                          loss_state_.targets.activations};
  ckpt.put_f64("loss/state", loss);
  ckpt.put_u64("loss/step", std::span<const std::uint64_t>(&loss_state_.step, 1));

  const double lr[3] = {lr_policy_.initial, lr_policy_.alpha, lr_policy_.current};
  ckpt.put_f64("lr/policy", lr);
  const std::uint64_t phase = lr_policy_.phase == LrPhase::annealing ? 1 : 0;
  ckpt.put_u64("lr/phase", std::span<const std::uint64_t>(&phase, 1));

  ckpt.put_u64("rng/state", rng_.state());
  const std::uint64_t cursor[4] = {epoch_, batch_in_epoch_, batches_done_, trigger_annealing_ ? 1u : 0u};
  ckpt.put_u64("cursor", cursor);

  json s;
  s["teacher_accuracy"] = summary_.teacher_accuracy;
  s["final_accuracy"] = summary_.final_accuracy;
  s["audits"] = summary_.audits;
  s["best_accuracy"] = summary_.best_accuracy ? json(*summary_.best_accuracy) : json(nullptr);
  s["first_reached_step"] = summary_.first_reached_step ? json(*summary_.first_reached_step) : json(nullptr);
  s["first_reached_accuracy"] =
      summary_.first_reached_accuracy ? json(*summary_.first_reached_accuracy) : json(nullptr);
  s["last_max_w"] = last_max_w_ ? json(*last_max_w_) : json(nullptr);
  s["last_max_a"] = last_max_a_ ? json(*last_max_a_) : json(nullptr);
  s["warnings"] = summary_.warnings;
  ckpt.put_text("meta/summary", s.dump());

  std::ostringstream csv;
  write_metrics_csv(csv, metrics_);
  ckpt.put_text("meta/metrics", csv.str());
  return ckpt;
}

QatRunner QatRunner::resume(const Checkpoint& ckpt, Model teacher, Dataset train, Dataset val) {
  if (!ckpt.contains("meta/kind") || ckpt.text("meta/kind") != "qat") {
    throw FormatError("checkpoint is not a QAT run checkpoint", 0);
  }
  RunConfig config = RunConfig::from_json(ckpt.text("meta/config"));
  QatRunner r(config, std::move(teacher), Model::load(ckpt, "model/"), std::move(train), std::move(val));

  auto& st = r.optimizer_.state();
  st.step = ckpt.u64("optim/step").at(0);
  const auto hyper = ckpt.f64("optim/hyper");
  if (hyper.size() != 3) throw FormatError("optimizer hyper-parameters malformed", 0);
  st.beta1 = hyper[0];
  st.beta2 = hyper[1];
  st.eps = hyper[2];
  const auto& params = r.optimizer_.parameters();
  st.m.resize(params.size());
  st.v.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = ckpt.f64("optim/m/" + params[i].name);
    st.v[i] = ckpt.f64("optim/v/" + params[i].name);
    if (st.m[i].size() != params[i].tensor.numel() || st.v[i].size() != params[i].tensor.numel()) {
      throw FormatError("optimizer moments for '" + params[i].name + "' have the wrong size", 0);
    }
  }

  const auto loss = ckpt.f64("loss/state");
  if (loss.size() != 7) throw FormatError("loss state malformed", 0);
  r.loss_state_.t_q = loss[0];
  r.loss_state_.t_r = loss[1];
  r.loss_state_.c_r = loss[2];
  r.loss_state_.c_r_sum = loss[3];
  r.loss_state_.initial_t_q = loss[4];
  r.loss_state_.targets = {loss[5], loss[6]};
  r.loss_state_.step = ckpt.u64("loss/step").at(0);

  const auto lr = ckpt.f64("lr/policy");
  if (lr.size() != 3) throw FormatError("learning-rate policy malformed", 0);
  r.lr_policy_.initial = lr[0];
  r.lr_policy_.alpha = lr[1];
  r.lr_policy_.current = lr[2];
  r.lr_policy_.phase = ckpt.u64("lr/phase").at(0) ? LrPhase::annealing : LrPhase::constant;

  r.rng_.set_state(ckpt.u64("rng/state"));
  const auto cursor = ckpt.u64("cursor");
  if (cursor.size() != 4) throw FormatError("cursor malformed", 0);
  r.epoch_ = cursor[0];
  r.batch_in_epoch_ = cursor[1];
  r.batches_done_ = cursor[2];
  r.trigger_annealing_ = cursor[3] != 0;

  const json s = json::parse(ckpt.text("meta/summary"));
  r.summary_.final_accuracy = s.at("final_accuracy").get<double>();
  r.summary_.audits = s.at("audits").get<std::size_t>();
  r.summary_.batches = r.batches_done_;
  if (!s.at("best_accuracy").is_null()) r.summary_.best_accuracy = s["best_accuracy"].get<double>();
  if (!s.at("first_reached_step").is_null()) r.summary_.first_reached_step = s["first_reached_step"].get<std::uint64_t>();
  if (!s.at("first_reached_accuracy").is_null()) {
    r.summary_.first_reached_accuracy = s["first_reached_accuracy"].get<double>();
  }
  if (!s.at("last_max_w").is_null()) r.last_max_w_ = s["last_max_w"].get<double>();
  if (!s.at("last_max_a").is_null()) r.last_max_a_ = s["last_max_a"].get<double>();
  r.summary_.warnings = s.at("warnings").get<std::vector<std::string>>();

  std::istringstream csv(ckpt.text("meta/metrics"));
  r.metrics_ = read_metrics_csv(csv);
  return r;
}

// ---- fusion ---------------------------------------------------------------------

std::vector<FusedLayer> fuse_model(const Model& student) {
  if (!student.quantized()) throw FusionError("only quantized students can be fused");
  std::vector<FusedLayer> out;
  for (auto i : student.quantized_layer_indices()) {
    const Layer& l = student.layers()[i];
    FusedLayer f = integer_fuse(l.weight, l.bias, *l.weight_quantizer, *l.activation_quantizer, l.spec.activation);
    if (l.bn) {
      // fold eval-mode batch norm into a per-channel scale and shift
      const auto& bn = *l.bn;
      f.channel_scale.resize(l.spec.out);
      f.bias.assign(l.spec.out, 0.0);
      for (std::size_t c = 0; c < l.spec.out; ++c) {
        const double g = bn.gamma[c] / std::sqrt(bn.running_var[c] + bn.eps);
        f.channel_scale[c] = g;
        f.bias[c] = bn.beta[c] - g * bn.running_mean[c];
      }
    }
    out.push_back(std::move(f));
  }
  return out;
}

std::string fused_to_json(const Model& student, const std::vector<FusedLayer>& layers) {
  json j;
  j["model"] = json::parse(student.spec().to_json());
  j["layers"] = json::array();
  const auto indices = student.quantized_layer_indices();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& f = layers[k];
    j["layers"].push_back({{"layer", indices.at(k)},
                           {"in", f.in},
                           {"out", f.out},
                           {"weight_scale", f.weight_scale},
                           {"activation_scale", f.activation_scale},
                           {"activation_lower", f.activation_lower},
                           {"activation_upper", f.activation_upper},
                           {"activation", f.activation == Activation::relu ? "relu" : "identity"},
                           {"weights", f.weights},
                           {"bias", f.bias},
                           {"channel_scale", f.channel_scale}});
  }
  return j.dump();
}

}  // namespace gdnsq
