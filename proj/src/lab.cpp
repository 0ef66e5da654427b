#include "ebmlab/lab.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>

#include "ebmlab/error.hpp"
#include "ebmlab/io.hpp"
#include "ebmlab/optim.hpp"
#include "ebmlab/rng.hpp"

namespace ebmlab::lab {

using nlohmann::json;

namespace {

const std::vector<std::string> kObjectives = {"ssm", "cd", "vera", "nf", "ce"};
const std::vector<std::string> kSources = {"csv", "two-moons", "blobs", "gratings"};
const std::vector<std::string> kOodKinds = {"removed", "noise", "constant", "oodomain",
                                            "uniform-box"};

bool one_of(const std::string& v, const std::vector<std::string>& options) {
  return std::find(options.begin(), options.end(), v) != options.end();
}

void check_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || key == k;
    if (!known) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.template get<std::int64_t>() >= 0)) {
      throw ConfigError(where + "." + key + " must be a non-negative integer");
    }
  }
  try {
    out = v.template get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("invalid " + where + "." + key + ": " + e.what());
  }
}

template <class T>
void read(const json& j, const char* key, std::optional<T>& out, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  T v{};
  read(j, key, v, where);
  out = v;
}

void parse_sgld(const json& j, samplers::SgldConfig& s) {
  check_keys(j, {"steps", "step_size", "noise_std", "coupled_noise"}, "train.sgld");
  read(j, "steps", s.steps, "train.sgld");
  read(j, "step_size", s.step_size, "train.sgld");
  read(j, "noise_std", s.noise_std, "train.sgld");
  read(j, "coupled_noise", s.coupled_noise, "train.sgld");
}

void parse_vera(const json& j, objectives::VeraConfig& v) {
  const std::string w = "train.vera";
  check_keys(j,
             {"entropy_weight", "eta_init", "eta_min", "eta_max", "sigma_x", "posterior_samples",
              "latent_dim", "generator_hidden", "ebm_lr", "generator_lr", "generator_beta1", "generator_beta2", "eta_lr"},
             w);
  read(j, "entropy_weight", v.entropy_weight, w);
  read(j, "eta_init", v.eta_init, w);
  read(j, "eta_min", v.eta_min, w);
  read(j, "eta_max", v.eta_max, w);
  read(j, "sigma_x", v.sigma_x, w);
  read(j, "posterior_samples", v.posterior_samples, w);
  read(j, "latent_dim", v.latent_dim, w);
  read(j, "generator_hidden", v.generator_hidden, w);
  read(j, "ebm_lr", v.ebm_lr, w);
  read(j, "generator_lr", v.generator_lr, w);
  read(j, "generator_beta1", v.generator_beta1, w);
  read(j, "generator_beta2", v.generator_beta2, w);
  read(j, "eta_lr", v.eta_lr, w);
}

TrainConfig parse_train(const json& j) {
  TrainConfig t;
  const std::string w = "train";
  check_keys(j,
             {"steps", "batch_size", "lr", "weight_decay", "warmup", "eval_every", "patience", "sgld",
              "clamp_to_box", "buffer", "data_noise_var", "vera"},
             w);
  read(j, "steps", t.steps, w);
  read(j, "batch_size", t.batch_size, w);
  read(j, "lr", t.lr, w);
  read(j, "weight_decay", t.weight_decay, w);
  read(j, "warmup", t.warmup, w);
  read(j, "eval_every", t.eval_every, w);
  read(j, "patience", t.patience, w);
  if (j.contains("sgld")) parse_sgld(j.at("sgld"), t.sgld);
  read(j, "clamp_to_box", t.clamp_to_box, w);
  if (j.contains("buffer")) {
    const json& b = j.at("buffer");
    check_keys(b, {"capacity", "reinit_prob"}, "train.buffer");
    read(b, "capacity", t.buffer_capacity, "train.buffer");
    read(b, "reinit_prob", t.reinit_prob, "train.buffer");
  }
  read(j, "data_noise_var", t.data_noise_var, w);
  if (j.contains("vera")) parse_vera(j.at("vera"), t.vera);
  return t;
}

DataConfig parse_data(const json& j) {
  DataConfig d;
  const std::string w = "data";
  check_keys(j,
             {"source", "path", "label_column", "n", "noise", "dim", "classes", "spread", "side",
              "remove_classes", "standardize", "split"},
             w);
  read(j, "source", d.source, w);
  read(j, "path", d.path, w);
  if (j.contains("label_column")) {
    if (j.at("label_column").is_null()) {
      d.label_column.reset();
    } else {
      std::string col;
      read(j, "label_column", col, w);
      d.label_column = col;
    }
  }
  read(j, "n", d.n, w);
  read(j, "noise", d.noise, w);
  read(j, "dim", d.dim, w);
  read(j, "classes", d.classes, w);
  read(j, "spread", d.spread, w);
  read(j, "side", d.side, w);
  read(j, "remove_classes", d.remove_classes, w);
  read(j, "standardize", d.standardize, w);
  if (j.contains("split")) {
    const json& s = j.at("split");
    check_keys(s, {"ood_val_frac", "id_train_frac", "id_val_frac"}, "data.split");
    read(s, "ood_val_frac", d.split.ood_val_frac, "data.split");
    read(s, "id_train_frac", d.split.id_train_frac, "data.split");
    read(s, "id_val_frac", d.split.id_val_frac, "data.split");
  }
  return d;
}

OodConfig parse_ood(const json& j) {
  OodConfig o;
  check_keys(j, {"val", "test", "n", "box_scale"}, "ood");
  read(j, "val", o.val, "ood");
  read(j, "test", o.test, "ood");
  read(j, "n", o.n, "ood");
  read(j, "box_scale", o.box_scale, "ood");
  return o;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(); }

// Config as stored next to results: the output location is implied by where
// the file lives, so emitted files do not depend on the directory name.
json stored_config(const RunConfig& c) {
  json j = to_json(c);
  j["out"] = "";
  return j;
}

}  // namespace

// ---- configuration ------------------------------------------------------------

double default_lr(const std::string& objective) {
  if (objective == "vera") return objectives::VeraConfig{}.ebm_lr;
  if (one_of(objective, kObjectives)) return 1e-3;
  throw ConfigError("unknown objective '" + objective + "'");
}

void RunConfig::validate() const {
  if (!one_of(objective, kObjectives)) {
    throw ConfigError("objective must be one of ssm, cd, vera, nf, ce (got '" + objective + "')");
  }
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be finite and >= 0");
  if (gamma > 0.0 && (objective == "nf" || objective == "ce")) {
    throw ConfigError("gamma applies to the ssm, cd and vera objectives only");
  }
  if (name.empty() || name.find('/') != std::string::npos) {
    throw ConfigError("name must be non-empty and contain no '/'");
  }
  if (model) model->validate();
  if (!one_of(data.source, kSources)) throw ConfigError("unknown data source '" + data.source + "'");
  if (data.source == "csv" && data.path.empty()) throw ConfigError("data.path is required for csv");
  if (data.source != "csv" && data.n < 2) throw ConfigError("data.n must be >= 2");
  for (const auto* list : {&ood.val, &ood.test}) {
    for (const auto& k : *list) {
      if (!one_of(k, kOodKinds)) throw ConfigError("unknown OOD set kind '" + k + "'");
    }
  }
  if (!(ood.box_scale > 0.0)) throw ConfigError("ood.box_scale must be > 0");
  if (ood.n && *ood.n < 1) throw ConfigError("ood.n must be >= 1");
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (train.eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
  if (train.patience < 1) throw ConfigError("train.patience must be >= 1");
  if (train.lr && !(*train.lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (train.weight_decay && !(*train.weight_decay >= 0.0)) {
    throw ConfigError("train.weight_decay must be >= 0");
  }
  train.sgld.validate();
  if (train.buffer_capacity < 1) throw ConfigError("train.buffer.capacity must be >= 1");
  if (!(train.reinit_prob >= 0.0 && train.reinit_prob <= 1.0)) {
    throw ConfigError("train.buffer.reinit_prob must lie in [0, 1]");
  }
  if (!(train.data_noise_var >= 0.0)) throw ConfigError("train.data_noise_var must be >= 0");
  const auto& v = train.vera;
  if (!(v.eta_min > 0.0 && v.eta_min <= v.eta_init && v.eta_init <= v.eta_max)) {
    throw ConfigError("train.vera: need 0 < eta_min <= eta_init <= eta_max");
  }
  if (!(v.sigma_x > 0.0) || v.posterior_samples < 1 || v.latent_dim < 1) {
    throw ConfigError("train.vera: sigma_x, posterior_samples and latent_dim must be positive");
  }
  if (!(v.ebm_lr > 0.0 && v.generator_lr > 0.0) || !(v.entropy_weight >= 0.0)) {
    throw ConfigError("train.vera: learning rates must be > 0 and entropy_weight >= 0");
  }
}

RunConfig config_from_json(const json& j) {
  check_keys(j, {"version", "name", "objective", "gamma", "seed", "model", "data", "ood", "train", "out"},
             "config");
  if (!j.contains("version")) throw ConfigError("config.version is required");
  if (!j.contains("objective")) throw ConfigError("config.objective is required");
  int version = 0;
  read(j, "version", version, "config");
  if (version != RunConfig::kVersion) {
    throw ConfigError("config version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(RunConfig::kVersion) + ")");
  }
  RunConfig c;
  read(j, "name", c.name, "config");
  read(j, "objective", c.objective, "config");
  read(j, "gamma", c.gamma, "config");
  read(j, "seed", c.seed, "config");
  if (j.contains("model") && !j.at("model").is_null()) c.model = models::spec_from_json(j.at("model"));
  if (j.contains("data")) c.data = parse_data(j.at("data"));
  if (j.contains("ood")) c.ood = parse_ood(j.at("ood"));
  if (j.contains("train")) c.train = parse_train(j.at("train"));
  read(j, "out", c.out, "config");
  c.validate();
  return c;
}

json to_json(const RunConfig& c) {
  const auto& t = c.train;
  const auto& v = t.vera;
  json vera = {{"entropy_weight", v.entropy_weight}, {"eta_init", v.eta_init},
               {"eta_min", v.eta_min},               {"eta_max", v.eta_max},
               {"sigma_x", v.sigma_x},               {"posterior_samples", v.posterior_samples},
               {"latent_dim", v.latent_dim},         {"generator_hidden", v.generator_hidden},
               {"ebm_lr", v.ebm_lr},
               {"generator_lr", v.generator_lr},     {"generator_beta1", v.generator_beta1},
               {"generator_beta2", v.generator_beta2}, {"eta_lr", optional_json(v.eta_lr)}};
  json train = {{"steps", t.steps},
                {"batch_size", t.batch_size},
                {"lr", optional_json(t.lr)},
                {"weight_decay", optional_json(t.weight_decay)},
                {"warmup", t.warmup},
                {"eval_every", t.eval_every},
                {"patience", t.patience},
                {"sgld",
                 {{"steps", t.sgld.steps},
                  {"step_size", t.sgld.step_size},
                  {"noise_std", t.sgld.noise_std},
                  {"coupled_noise", t.sgld.coupled_noise}}},
                {"clamp_to_box", t.clamp_to_box},
                {"buffer", {{"capacity", t.buffer_capacity}, {"reinit_prob", t.reinit_prob}}},
                {"data_noise_var", t.data_noise_var},
                {"vera", vera}};
  const auto& d = c.data;
  json data = {{"source", d.source},
               {"path", d.path},
               {"label_column", d.label_column ? json(*d.label_column) : json()},
               {"n", d.n},
               {"noise", d.noise},
               {"dim", d.dim},
               {"classes", d.classes},
               {"spread", d.spread},
               {"side", d.side},
               {"remove_classes", d.remove_classes},
               {"standardize", d.standardize},
               {"split",
                {{"ood_val_frac", d.split.ood_val_frac},
                 {"id_train_frac", d.split.id_train_frac},
                 {"id_val_frac", d.split.id_val_frac}}}};
  json ood = {{"val", c.ood.val},
              {"test", c.ood.test},
              {"n", c.ood.n ? json(*c.ood.n) : json()},
              {"box_scale", c.ood.box_scale}};
  return {{"version", RunConfig::kVersion},
          {"name", c.name},
          {"objective", c.objective},
          {"gamma", c.gamma},
          {"seed", c.seed},
          {"model", c.model ? models::to_json(*c.model) : json()},
          {"data", data},
          {"ood", ood},
          {"train", train},
          {"out", c.out}};
}

RunConfig load_config(const std::string& path) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

// ---- data ---------------------------------------------------------------------------

namespace {

data::LabeledTable load_source(const RunConfig& c) {
  const auto& d = c.data;
  Rng rng = make_stream(derive_seed(c.seed, 1), Stream::kData);
  if (d.source == "csv") return data::load_csv(d.path, data::CsvSchema{d.label_column, ','});
  if (d.source == "two-moons") return data::make_two_moons(d.n, d.noise, rng);
  if (d.source == "blobs") return data::make_blobs(d.n, d.dim, d.classes, d.spread, rng);
  return data::make_gratings(d.n, d.side, d.classes, d.noise, rng);
}

eval::OodSet make_set(const std::string& kind, const Tensor& id_part,
                      const std::optional<data::LabeledTable>& removed, const samplers::Box& box,
                      const OodConfig& ood, Rng& rng) {
  const std::size_t n = ood.n.value_or(id_part.rows());
  const std::size_t d = id_part.cols();
  eval::OodSet s{kind, eval::group_for(kind), {}};
  if (kind == "removed") {
    if (!removed) throw ConfigError("OOD set 'removed' needs data.remove_classes");
    s.features = removed->features;
  } else if (kind == "noise") {
    s.features = data::make_noise(n, d, rng);
  } else if (kind == "constant") {
    s.features = data::make_constant(n, d, rng);
  } else if (kind == "oodomain") {
    s.features = data::make_oodomain(id_part);
  } else {
    s.features = box.scaled(ood.box_scale).sample(rng, n);
  }
  return s;
}

}  // namespace

Prepared prepare_data(const RunConfig& config) {
  config.validate();
  const data::LabeledTable table = load_source(config);
  data::SplitOptions opts = config.data.split;
  opts.seed = config.seed;
  Prepared p;
  p.bundle = config.data.remove_classes.empty()
                 ? data::id_only_split(table, opts)
                 : data::class_removal_split(table, config.data.remove_classes, opts);
  if (config.data.standardize) p.bundle = data::standardize(std::move(p.bundle));
  p.box = samplers::Box::bounding(p.bundle.id_train.features);

  const bool removal = p.bundle.ood_test.has_value();
  std::vector<std::string> val = config.ood.val, test = config.ood.test;
  if (val.empty()) val = {removal ? "removed" : "uniform-box"};
  if (test.empty()) {
    test = removal ? std::vector<std::string>{"removed", "noise", "constant", "oodomain"}
                   : std::vector<std::string>{"uniform-box"};
  }
  Rng rng = make_stream(config.seed, Stream::kEval);
  for (const auto& k : val) {
    p.val_sets.push_back(make_set(k, p.bundle.id_val.features, p.bundle.ood_val, p.box, config.ood, rng));
  }
  for (const auto& k : test) {
    p.test_sets.push_back(
        make_set(k, p.bundle.id_test.features, p.bundle.ood_test, p.box, config.ood, rng));
  }
  return p;
}

Prepared embed_prepared(const models::Model& classifier, const Prepared& p) {
  Prepared e;
  e.bundle = data::embed_dataset(classifier.spec, classifier.params, p.bundle);
  e.bundle.stats.reset();
  e.box = samplers::Box::bounding(e.bundle.id_train.features);
  auto embed = [&](const std::vector<eval::OodSet>& sets) {
    std::vector<eval::OodSet> out;
    for (const auto& s : sets) {
      out.push_back({s.name, s.group,
                     models::classifier_embed(classifier.spec, classifier.params, s.features)});
    }
    return out;
  };
  e.val_sets = embed(p.val_sets);
  e.test_sets = embed(p.test_sets);
  return e;
}

// ---- training ------------------------------------------------------------------------------

models::ModelSpec default_model(const RunConfig& config, const data::SplitBundle& bundle) {
  const std::size_t d = bundle.id_train.dim();
  if (config.objective == "nf") {
    models::ModelSpec s;
    s.input_dim = d;
    s.head = models::HeadKind::kFlow;
    s.flow_layers = 20;
    return s;
  }
  const auto& t = bundle.id_train;
  const bool classes = t.labeled() && t.class_count() >= 2;
  models::ModelSpec s = classes ? models::default_tabular_spec(d, models::HeadKind::kLogits, t.class_count())
                                : models::default_tabular_spec(d);
  if (config.objective == "ssm") s.activation = models::Activation::kSwish;
  return s;
}

std::string run_tag(const std::string& objective, double gamma, bool embedded) {
  std::string tag;
  for (char ch : objective) tag += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  if (gamma == 1.0) {
    tag += "-S";
  } else if (gamma > 0.0) {
    tag += "-g" + io::format_double(gamma);
  }
  if (embedded) tag += "-E";
  return tag;
}

namespace {

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

Tensor take_batch(const Tensor& x, std::span<const std::size_t> idx) {
  Tensor b({idx.size(), x.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) b(i, j) = x(idx[i], j);
  }
  return b;
}

ad::EnergyFn energy_of(const models::ModelSpec& spec, std::vector<ad::Var> params) {
  return [&spec, params = std::move(params)](ad::Trace& t, ad::Var x) {
    return models::energy(t, spec, params, x);
  };
}

// base + gamma * CE of the logits on the clean batch.
ad::Var add_supervision(ad::Trace& trace, ad::Var base, const models::ModelSpec& spec,
                        std::span<const ad::Var> params, const Tensor& batch,
                        std::span<const int> labels, double gamma) {
  if (gamma == 0.0) return base;
  const ad::Var logits = models::forward(trace, spec, params, trace.constant(batch));
  const ad::Var ce = objectives::ce_loss(trace, logits, labels);
  return objectives::jem_loss(base, ce, {gamma, objectives::BaseObjective::kCd});
}

double accuracy(const models::Model& m, const data::LabeledTable& t) {
  const Tensor l = models::logits(m.spec, m.params, t.features);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < l.rows(); ++i) {
    const auto row = l.row_span(i);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    hits += best == t.labels[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(l.rows());
}

double mean_loglik(const models::Model& m, const Tensor& x) {
  const auto v = models::flow_logdensity(m.spec, m.params, x).values();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<double> column_means(const Tensor& x) {
  std::vector<double> m(x.cols(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) m[j] += x(i, j);
  }
  for (auto& v : m) v /= static_cast<double>(x.rows());
  return m;
}

}  // namespace

TrainResult train_prepared(const RunConfig& config, const Prepared& data, const std::string& tag) {
  config.validate();
  const auto& tc = config.train;
  const auto& train_set = data.bundle.id_train;
  const std::size_t d = train_set.dim();
  const models::ModelSpec spec = config.model.value_or(default_model(config, data.bundle));
  spec.validate();
  if (spec.input_dim != d) {
    throw ConfigError("model input_dim " + std::to_string(spec.input_dim) + " does not match data dimension " +
                      std::to_string(d));
  }
  const std::string& obj = config.objective;
  const bool flow = spec.head == models::HeadKind::kFlow;
  if ((obj == "nf") != flow) throw ConfigError("the nf objective and a flow head go together");
  const bool supervised = obj == "ce" || config.gamma > 0.0;
  if (supervised) {
    if (spec.head != models::HeadKind::kLogits) throw ConfigError(obj + " with supervision needs a logits head");
    if (!train_set.labeled() || spec.classes != train_set.class_count()) {
      throw ConfigError("supervision needs labels matching the logits head's class count");
    }
  }

  models::Model model{spec, models::initialize(spec, config.seed)};
  const double base_lr = tc.lr.value_or(obj == "vera" ? tc.vera.ebm_lr : default_lr(obj));
  AdamSettings adam;
  adam.weight_decay = tc.weight_decay.value_or(obj == "ce" ? 5e-4 : 0.0);
  Adam opt(model.params.size(), adam);

  Rng batch_rng = make_stream(config.seed, Stream::kBatch);
  Rng sgld_rng = make_stream(config.seed, Stream::kSgld);
  Rng proj_rng = make_stream(config.seed, Stream::kProjection);
  Rng noise_rng = make_stream(config.seed, Stream::kNoise);
  Rng gen_rng = make_stream(config.seed, Stream::kGenerator);

  samplers::SgldConfig sgld = tc.sgld;
  if (tc.clamp_to_box) sgld.clamp = data.box;
  samplers::ReplayBuffer buffer(data.box, tc.buffer_capacity, tc.reinit_prob);

  std::optional<models::Model> generator;
  std::optional<Adam> gen_opt;
  std::optional<objectives::VeraState> vera_state;
  if (obj == "vera") {
    const auto gspec = objectives::generator_spec(tc.vera.latent_dim, d, tc.vera.generator_hidden);
    generator = models::Model{gspec, models::initialize(gspec, derive_seed(config.seed, 1))};
    gen_opt.emplace(generator->params.size(),
                    AdamSettings{tc.vera.generator_beta1, tc.vera.generator_beta2, 1e-8, 0.0});
    vera_state.emplace(tc.vera);
  }

  TrainResult result;
  std::vector<double> best = model.params.values;
  std::int64_t best_step = tc.steps == 0 ? 0 : -1;
  double best_score = -INFINITY;
  std::size_t stale = 0;
  std::string rule = obj == "nf" ? "val-loglik" : obj == "ce" ? "val-accuracy" : "ood-val-ap";
  if (rule == "ood-val-ap" && data.val_sets.empty()) rule = "final";
  const double noise_sd = std::sqrt(tc.data_noise_var);

  std::vector<std::size_t> idx(tc.batch_size);
  for (std::size_t step = 1; step <= tc.steps; ++step) {
    for (auto& i : idx) {
      i = static_cast<std::size_t>(uniform(batch_rng) * static_cast<double>(train_set.rows()));
      i = std::min(i, train_set.rows() - 1);
    }
    const Tensor batch = take_batch(train_set.features, idx);
    std::vector<int> labels;
    if (train_set.labeled()) {
      for (auto i : idx) labels.push_back(train_set.labels[i]);
    }
    const double lr = warmup_lr(base_lr, step, tc.warmup);

    double loss = 0.0;
    std::vector<double> grad;
    try {
      if (obj == "cd") {
        Tensor noisy = batch;
        if (noise_sd > 0.0) {
          for (auto& v : noisy.data()) v += normal(noise_rng, 0.0, noise_sd);
        }
        samplers::Draw draw = samplers::buffer_draw(buffer, tc.batch_size, sgld_rng);
        const Tensor samples = samplers::sgld_chain(model.energy_fn(), draw.points, sgld, sgld_rng);
        samplers::buffer_write(buffer, draw.slots, samples);
        ad::Trace trace(1);
        const auto pv = models::bind(trace, model.params, true);
        ad::Var l = objectives::cd_loss(trace, energy_of(spec, pv), noisy, samples);
        l = add_supervision(trace, l, spec, pv, batch, labels, config.gamma);
        loss = l.value().item();
        grad = models::flatten(trace.grad_wrt(l, pv));
      } else if (obj == "ssm") {
        ad::Trace trace(2);
        const auto pv = models::bind(trace, model.params, true);
        ad::Var l = objectives::ssm_vr_loss(trace, energy_of(spec, pv), batch, proj_rng);
        l = add_supervision(trace, l, spec, pv, batch, labels, config.gamma);
        loss = l.value().item();
        grad = models::flatten(trace.grad_wrt(l, pv));
      } else if (obj == "vera") {
        auto r = objectives::vera_step(model, *generator, batch, tc.vera, *vera_state, gen_rng);
        loss = r.ebm_loss;
        grad = std::move(r.ebm_grad);
        if (config.gamma > 0.0) {
          ad::Trace trace(1);
          const auto pv = models::bind(trace, model.params, true);
          const ad::Var logits = models::forward(trace, spec, pv, trace.constant(batch));
          const ad::Var ce = objectives::ce_loss(trace, logits, labels);
          const auto g = models::flatten(trace.grad_wrt(ce, pv));
          for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += config.gamma * g[k];
          loss += config.gamma * ce.value().item();
        }
        if (!all_finite(r.generator_grad)) throw NumericError("generator gradient is not finite");
        gen_opt->step(generator->params.values, r.generator_grad,
                      warmup_lr(tc.vera.generator_lr, step, tc.warmup));
      } else if (obj == "nf") {
        ad::Trace trace(1);
        const auto pv = models::bind(trace, model.params, true);
        const ad::Var l = objectives::flow_nll(trace, spec, pv, batch);
        loss = l.value().item();
        grad = models::flatten(trace.grad_wrt(l, pv));
      } else {
        ad::Trace trace(1);
        const auto pv = models::bind(trace, model.params, true);
        const ad::Var logits = models::forward(trace, spec, pv, trace.constant(batch));
        const ad::Var l = objectives::ce_loss(trace, logits, labels);
        loss = l.value().item();
        grad = models::flatten(trace.grad_wrt(l, pv));
      }
      if (!std::isfinite(loss)) throw NumericError("loss is not finite");
      if (!all_finite(grad)) throw NumericError("parameter gradient is not finite");
    } catch (const NumericError& e) {
      result.diverged = true;
      result.diagnostic = "step " + std::to_string(step) + ": " + e.what();
      break;
    }

    const std::vector<double> before = model.params.values;
    opt.step(model.params.values, grad, lr);
    if (!all_finite(model.params.values)) {
      model.params.values = before;
      result.diverged = true;
      result.diagnostic = "step " + std::to_string(step) + ": parameters became non-finite";
      break;
    }
    result.losses.push_back(loss);
    result.steps_run = step;

    if (step % tc.eval_every != 0 && step != tc.steps) continue;
    HistoryPoint h{step, loss, std::nullopt};
    double score = 0.0;
    try {
      if (rule == "ood-val-ap") {
        score = eval::selection_score(model, data.bundle.id_val.features, data.val_sets).score;
      } else if (rule == "val-loglik") {
        score = mean_loglik(model, data.bundle.id_val.features);
      } else if (rule == "val-accuracy") {
        score = accuracy(model, data.bundle.id_val);
      } else {
        score = static_cast<double>(step);
      }
      if (!std::isfinite(score)) throw NumericError("selection score is not finite");
    } catch (const NumericError& e) {
      result.diverged = true;
      result.diagnostic = "evaluation at step " + std::to_string(step) + ": " + e.what();
      break;
    }
    h.selection = score;
    result.history.push_back(h);
    if (score > best_score) {
      best_score = score;
      best = model.params.values;
      best_step = static_cast<std::int64_t>(step);
      stale = 0;
    } else if ((obj == "nf" || obj == "ce") && ++stale >= tc.patience) {
      break;
    }
  }
  // A run that diverged before its first evaluation keeps its last finite parameters.
  if (best_step < 0) {
    best = model.params.values;
    best_step = static_cast<std::int64_t>(result.steps_run);
  }
  model.params.values = best;

  eval::RunInfo info{obj, config.gamma, spec.bottleneck_factor, config.seed,
                     tag.empty() ? run_tag(obj, config.gamma) : tag};
  try {
    result.report = eval::ood_report(model, data.bundle.id_test.features, data.test_sets,
                                     data.bundle.id_val.features, data.val_sets, info);
  } catch (const Error& e) {
    result.report = eval::EvalReport{};
    result.report.run = info;
    result.diverged = true;
    result.diagnostic += (result.diagnostic.empty() ? "" : "; ") + std::string("report: ") + e.what();
  }
  result.report.selection.step = best_step;
  result.report.metadata = {{"name", config.name},
                            {"selection_rule", rule},
                            {"steps_run", result.steps_run},
                            {"diverged", result.diverged},
                            {"diagnostic", result.diagnostic}};

  result.checkpoint.spec = spec;
  result.checkpoint.params = model.params;
  result.checkpoint.metadata = {{"config", stored_config(config)},
                                {"tag", info.tag},
                                {"step", best_step},
                                {"id_train_mean", column_means(train_set.features)},
                                {"box", {{"lo", data.box.lo}, {"hi", data.box.hi}}}};
  return result;
}

TrainResult train(const RunConfig& config) {
  const Prepared p = prepare_data(config);
  TrainResult r = train_prepared(config, p);
  if (!config.out.empty()) write_run(config.out, config, p, r);
  return r;
}

// ---- outputs ---------------------------------------------------------------------------------

namespace {

std::string history_csv(const TrainResult& r) {
  std::string out = "x,value,series\n";
  for (std::size_t k = 0; k < r.losses.size(); ++k) {
    out += std::to_string(k + 1) + "," + io::format_double(r.losses[k]) + ",loss\n";
  }
  for (const auto& h : r.history) {
    if (h.selection) out += std::to_string(h.step) + "," + io::format_double(*h.selection) + ",selection\n";
  }
  return out;
}

void write_json(const std::string& path, const json& j) { io::write_text_atomic(path, j.dump(1) + "\n"); }

std::string join(const std::string& a, const std::string& b) {
  return (std::filesystem::path(a) / b).string();
}

}  // namespace

void write_run(const std::string& dir, const RunConfig& config, const Prepared& data,
               const TrainResult& result) {
  io::ensure_directory(dir);
  io::ensure_directory(join(dir, "data"));
  const std::string prov = "ebmlab " + config.name + " seed " + std::to_string(config.seed);
  data::write_csv(join(dir, "data/id.csv"), data::unlabeled(data.bundle.id_test.features, "id"), prov);
  for (const auto& s : data.test_sets) {
    data::write_csv(join(dir, "data/" + s.name + ".csv"), data::unlabeled(s.features, s.name), prov);
  }
  write_json(join(dir, "config.json"), stored_config(config));
  models::save_checkpoint(join(dir, "checkpoint.json"), result.checkpoint);
  io::write_text_atomic(join(dir, "history.csv"), history_csv(result));
  // Written last: a report.json only exists for runs whose other files are complete.
  write_json(join(dir, "report.json"), eval::to_json(result.report));
}

eval::EvalReport evaluate_directory(const models::Checkpoint& ckpt, const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError(dir + " is not a directory");
  const std::string id_path = join(dir, "id.csv");
  if (!fs::exists(id_path)) throw DataError(dir + " has no id.csv");
  const data::CsvSchema schema{std::nullopt, ','};
  const Tensor id = data::load_csv(id_path, schema).features;
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".csv" && e.path().filename() != "id.csv") {
      names.push_back(e.path().stem().string());
    }
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw DataError(dir + " holds no OOD csv files besides id.csv");
  std::vector<eval::OodSet> sets;
  for (const auto& n : names) {
    sets.push_back({n, eval::group_for(n), data::load_csv(join(dir, n + ".csv"), schema).features});
  }
  eval::RunInfo info;
  if (ckpt.metadata.contains("config")) {
    const auto& c = ckpt.metadata.at("config");
    info.objective = c.value("objective", std::string{});
    info.gamma = c.value("gamma", 0.0);
    info.seed = c.value("seed", std::uint64_t{0});
  }
  info.bottleneck = ckpt.spec.bottleneck_factor;
  info.tag = ckpt.metadata.value("tag", std::string{});
  auto report = eval::ood_report(ckpt.model(), id, sets, id, {}, info);
  report.metadata = {{"data", dir}};
  return report;
}

// ---- sweeps and pipelines --------------------------------------------------------------------

std::vector<SweepRow> gamma_sweep(const RunConfig& base, const std::vector<double>& grid,
                                  std::size_t seeds) {
  if (grid.empty() || seeds < 1) throw ConfigError("gamma sweep needs a non-empty grid and seeds >= 1");
  for (double g : grid) {
    if (!(g >= 0.0) || !std::isfinite(g)) throw ConfigError("gamma grid values must be finite and >= 0");
  }
  std::vector<SweepRow> rows;
  std::string table = "gamma,seed,tag,ood_set,group,auc_pr\n";
  for (std::size_t s = 0; s < seeds; ++s) {
    RunConfig cfg = base;
    cfg.seed = base.seed + s;
    const Prepared p = prepare_data(cfg);
    for (double g : grid) {
      cfg.gamma = g;
      TrainResult r = train_prepared(cfg, p);
      if (!base.out.empty()) {
        cfg.out = join(base.out, "gamma-" + io::format_double(g) + "/seed-" + std::to_string(cfg.seed));
        write_run(cfg.out, cfg, p, r);
        cfg.out = base.out;
      }
      for (const auto& res : r.report.results) {
        table += io::format_double(g) + "," + std::to_string(cfg.seed) + "," + r.report.run.tag + "," +
                 res.ood_set + "," + res.group + "," + io::format_double(res.auc_pr) + "\n";
      }
      rows.push_back({g, cfg.seed, std::move(r.report)});
    }
  }
  // Row order: gamma-major, as in the grid.
  std::stable_sort(rows.begin(), rows.end(), [&](const SweepRow& a, const SweepRow& b) {
    const auto ia = std::find(grid.begin(), grid.end(), a.gamma) - grid.begin();
    const auto ib = std::find(grid.begin(), grid.end(), b.gamma) - grid.begin();
    return ia < ib;
  });
  if (!base.out.empty()) io::write_text_atomic(join(base.out, "sweep.csv"), table);
  return rows;
}

EmbeddingResult embedding_pipeline(const RunConfig& config, const std::optional<TrainConfig>& classifier) {
  const Prepared raw = prepare_data(config);
  RunConfig ccfg = config;
  ccfg.objective = "ce";
  ccfg.gamma = 0.0;
  ccfg.model.reset();
  if (classifier) {
    ccfg.train = *classifier;
  } else {
    ccfg.train.lr.reset();
  }
  EmbeddingResult out;
  out.classifier = train_prepared(ccfg, raw);
  const Prepared emb = embed_prepared(out.classifier.checkpoint.model(), raw);
  out.ebm = train_prepared(config, emb, run_tag(config.objective, config.gamma, true));
  if (!config.out.empty()) {
    write_run(join(config.out, "classifier"), ccfg, raw, out.classifier);
    write_run(join(config.out, "ebm"), config, emb, out.ebm);
  }
  return out;
}

AscentRun likelihood_ascent_run(const models::Model& m, const Prepared& data, const std::string& start,
                                std::size_t points, std::size_t steps, double lr, std::uint64_t seed) {
  Rng rng = make_stream(derive_seed(seed, 3), Stream::kEval);
  Tensor x0;
  if (start == "noise") {
    x0 = data::make_noise(points, m.spec.input_dim, rng);
  } else if (start == "id-test") {
    const auto& f = data.bundle.id_test.features;
    std::vector<std::size_t> idx(std::min(points, f.rows()));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    x0 = take_batch(f, idx);
  } else {
    throw ConfigError("ascent start must be noise or id-test");
  }
  if (x0.cols() != m.spec.input_dim) throw ConfigError("ascent: model and data dimensions differ");
  const auto traj = samplers::likelihood_ascent(m.energy_fn(), x0, steps, lr);
  AscentRun r;
  r.curve_csv = "x,value,series\n";
  for (std::size_t k = 0; k < traj.logp.size(); ++k) {
    const auto& v = traj.logp[k];
    r.curve_csv += std::to_string(k) + "," +
                   io::format_double(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size())) +
                   ",mean-logp\n";
  }
  r.final_points = traj.points.back();
  r.diverged = traj.diverged;
  r.provenance = "likelihood ascent from " + start + ", " + std::to_string(traj.points.size() - 1) + " steps" +
                 (traj.diverged ? " (diverged)" : "");
  return r;
}

std::string norm_diagnostic_csv(const models::Model& m, const Prepared& data, const std::vector<double>& radii,
                                const std::string& mode, std::size_t n_random, std::uint64_t seed) {
  if (mode != "held-out" && mode != "random" && mode != "both") {
    throw ConfigError("directions must be held-out, random or both");
  }
  const auto anchor = column_means(data.bundle.id_train.features);
  if (anchor.size() != m.spec.input_dim) throw ConfigError("norm sweep: model and data dimensions differ");
  std::vector<eval::NormCurve> curves;
  std::vector<std::string> names;
  if (mode != "random") {
    curves.push_back(
        eval::norm_sweep(m, anchor, eval::directions_through(data.bundle.id_test.features, anchor), radii));
    curves.back().direction_mode = names.emplace_back("held-out");
  }
  if (mode != "held-out") {
    Rng rng = make_stream(derive_seed(seed, 4), Stream::kEval);
    curves.push_back(eval::norm_sweep(m, anchor, eval::random_directions(n_random, anchor.size(), rng), radii));
    curves.back().direction_mode = names.emplace_back("random");
  }
  return eval::curve_csv(curves, names);
}

// ---- suite -----------------------------------------------------------------------------------

std::vector<Improvement> relative_improvement(const std::vector<AggregateRow>& rows,
                                              const std::string& variant, const std::string& base) {
  std::vector<Improvement> out;
  for (const auto& v : rows) {
    if (v.run != variant) continue;
    for (const auto& b : rows) {
      if (b.run != base || b.ood_set != v.ood_set) continue;
      if (!(b.auc_pr > 0.0)) throw NumericError("relative improvement over a zero baseline AP");
      out.push_back({variant, base, v.ood_set, 100.0 * (v.auc_pr - b.auc_pr) / b.auc_pr});
    }
  }
  return out;
}

std::string aggregate_csv(const std::vector<AggregateRow>& rows) {
  std::string out = "run,tag,ood_set,group,auc_pr\n";
  for (const auto& r : rows) {
    out += r.run + "," + r.tag + "," + r.ood_set + "," + r.group + "," + io::format_double(r.auc_pr) + "\n";
  }
  return out;
}

std::string improvement_csv(const std::vector<Improvement>& rows) {
  std::string out = "variant,base,ood_set,improvement_percent\n";
  for (const auto& r : rows) {
    out += r.variant + "," + r.base + "," + r.ood_set + "," + io::format_double(r.percent) + "\n";
  }
  return out;
}

namespace {

struct Trained {
  RunConfig config;
  Prepared data;
  TrainResult result;
};

void add_rows(std::vector<AggregateRow>& rows, const std::string& run, const eval::EvalReport& r) {
  for (const auto& res : r.results) rows.push_back({run, r.run.tag, res.ood_set, res.group, res.auc_pr});
}

std::vector<double> number_list(const json& entry, const char* key, std::vector<double> fallback) {
  if (!entry.contains(key)) return fallback;
  try {
    return entry.at(key).get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid ") + key + ": " + e.what());
  }
}

std::size_t count_of(const json& entry, const char* key, std::size_t fallback) {
  if (!entry.contains(key)) return fallback;
  const json& v = entry.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) throw ConfigError(std::string(key) + " must be a non-negative integer");
  return entry.at(key).get<std::size_t>();
}

// Trains from the entry's config, or reuses the model of an earlier run named by "from".
const Trained& model_for(const json& entry, const std::string& dir, std::map<std::string, Trained>& trained,
                         const std::string& name) {
  if (entry.contains("from")) {
    const auto from = entry.at("from").get<std::string>();
    const auto it = trained.find(from);
    if (it == trained.end()) throw ConfigError("run '" + from + "' has not produced a model");
    return it->second;
  }
  if (!entry.contains("config")) throw ConfigError("run '" + name + "' needs a config or a 'from' run");
  Trained t;
  t.config = config_from_json(entry.at("config"));
  t.config.out = dir;
  t.data = prepare_data(t.config);
  t.result = train_prepared(t.config, t.data);
  write_run(dir, t.config, t.data, t.result);
  if (t.result.diverged) throw NumericError("training diverged: " + t.result.diagnostic);
  return trained[name] = std::move(t);
}

void run_smoothness(const json& e, const Trained& t, const std::string& dir) {
  const models::Model m = t.result.checkpoint.model();
  const std::size_t side = count_of(e, "side", 0) ? count_of(e, "side", 0)
                                                  : static_cast<std::size_t>(std::llround(std::sqrt(
                                                        static_cast<double>(m.spec.input_dim))));
  if (side * side != m.spec.input_dim) {
    throw ConfigError("smoothness needs square images: input_dim " + std::to_string(m.spec.input_dim));
  }
  const std::size_t images = count_of(e, "images", 1000), bins = count_of(e, "bins", 30);
  Rng rng = make_stream(derive_seed(t.config.seed, 2), Stream::kEval);
  std::vector<eval::ScoreSet> sets{eval::score_dataset(m, t.data.bundle.id_test.features, "id-test")};
  for (double p : number_list(e, "pools", {1, 2, 3, 4, 16})) {
    const auto pool = static_cast<std::size_t>(p);
    if (static_cast<double>(pool) != p || pool < 1) throw ConfigError("pool sizes must be positive integers");
    sets.push_back(eval::score_dataset(m, data::make_smoothness(images, side, pool, rng),
                                       "pool-" + std::to_string(pool)));
  }
  io::write_text_atomic(join(dir, "smoothness.csv"), eval::histogram_csv(eval::density_histogram(sets, bins)));
}

void run_ascent(const json& e, const Trained& t, const std::string& dir) {
  const auto r = likelihood_ascent_run(t.result.checkpoint.model(), t.data, e.value("start", std::string("noise")),
                                       count_of(e, "points", 100), count_of(e, "steps", 100), e.value("lr", 0.01),
                                       t.config.seed);
  io::write_text_atomic(join(dir, "ascent.csv"), r.curve_csv);
  data::write_csv(join(dir, "ascent-final.csv"), data::unlabeled(r.final_points, "ascent"), r.provenance);
}

void run_norm(const json& e, const Trained& t, const std::string& dir) {
  io::write_text_atomic(join(dir, "norm.csv"),
                        norm_diagnostic_csv(t.result.checkpoint.model(), t.data,
                                            number_list(e, "radii", {0, 1, 2, 5, 10, 20, 50}),
                                            e.value("directions", std::string("both")),
                                            count_of(e, "n_directions", 100), t.config.seed));
}

}  // namespace

SuiteSummary run_experiment_suite(const json& manifest, const std::string& out) {
  check_keys(manifest, {"version", "runs", "improvements"}, "manifest");
  if (manifest.value("version", 0) != 1) throw ConfigError("manifest version must be 1");
  const json runs = manifest.value("runs", json::array());
  const json improvements = manifest.value("improvements", json::array());
  if (!runs.is_array() || !improvements.is_array()) throw ConfigError("runs and improvements must be arrays");
  std::vector<std::string> names;
  for (const auto& e : runs) {
    check_keys(e,
               {"name", "kind", "config", "from", "grid", "seeds", "classifier", "factors", "pools", "images",
                "side", "bins", "steps", "lr", "points", "start", "radii", "directions", "n_directions"},
               "manifest run");
    const auto name = e.value("name", std::string{});
    if (name.empty() || name.find('/') != std::string::npos) throw ConfigError("run names must be non-empty, no '/'");
    if (std::find(names.begin(), names.end(), name) != names.end()) throw ConfigError("duplicate run '" + name + "'");
    names.push_back(name);
  }

  io::ensure_directory(out);
  SuiteSummary summary;
  std::vector<AggregateRow> rows;
  std::map<std::string, Trained> trained;
  for (const auto& e : runs) {
    const auto name = e.at("name").get<std::string>();
    const auto kind = e.value("kind", std::string("train"));
    const std::string dir = join(out, name);
    std::vector<AggregateRow> run_rows;
    try {
      io::ensure_directory(dir);
      if (kind == "train") {
        add_rows(run_rows, name, model_for(e, dir, trained, name).result.report);
      } else if (kind == "embedding") {
        RunConfig cfg = config_from_json(e.at("config"));
        cfg.out = dir;
        std::optional<TrainConfig> ctrain;
        if (e.contains("classifier")) ctrain = parse_train(e.at("classifier"));
        const auto r = embedding_pipeline(cfg, ctrain);
        add_rows(run_rows, name + "/classifier", r.classifier.report);
        add_rows(run_rows, name, r.ebm.report);
      } else if (kind == "gamma-sweep") {
        RunConfig cfg = config_from_json(e.at("config"));
        cfg.out = dir;
        const auto sweep = gamma_sweep(cfg, number_list(e, "grid", kDefaultGammaGrid), count_of(e, "seeds", 3));
        for (const auto& r : sweep) {
          add_rows(run_rows, name + "/gamma-" + io::format_double(r.gamma) + "/seed-" + std::to_string(r.seed),
                   r.report);
        }
      } else if (kind == "bottleneck") {
        RunConfig cfg = config_from_json(e.at("config"));
        const Prepared p = prepare_data(cfg);
        for (double f : number_list(e, "factors", {1.0, 0.5, 0.2})) {
          RunConfig c = cfg;
          models::ModelSpec spec = cfg.model.value_or(default_model(cfg, p.bundle));
          spec.bottleneck_factor = f;
          c.model = spec;
          const std::string sub = "bottleneck-" + io::format_double(f);
          c.out = join(dir, sub);
          const auto r = train_prepared(c, p);
          write_run(c.out, c, p, r);
          add_rows(run_rows, name + "/" + sub, r.report);
        }
      } else if (kind == "smoothness") {
        run_smoothness(e, model_for(e, dir, trained, name), dir);
      } else if (kind == "ascent") {
        run_ascent(e, model_for(e, dir, trained, name), dir);
      } else if (kind == "norm-sweep") {
        run_norm(e, model_for(e, dir, trained, name), dir);
      } else {
        throw ConfigError("unknown run kind '" + kind + "'");
      }
      rows.insert(rows.end(), run_rows.begin(), run_rows.end());
      summary.succeeded.push_back(name);
    } catch (const std::exception& ex) {
      summary.failed.push_back(name + ": " + ex.what());
      write_json(join(dir, "error.json"), {{"run", name}, {"kind", kind}, {"error", ex.what()}});
    }
  }

  std::vector<Improvement> imp;
  for (const auto& i : improvements) {
    check_keys(i, {"variant", "base"}, "manifest improvement");
    try {
      const auto v = relative_improvement(rows, i.at("variant").get<std::string>(), i.at("base").get<std::string>());
      imp.insert(imp.end(), v.begin(), v.end());
    } catch (const std::exception& ex) {
      summary.failed.push_back("improvement " + i.dump() + ": " + ex.what());
    }
  }
  io::write_text_atomic(join(out, "aggregate.csv"), aggregate_csv(rows));
  io::write_text_atomic(join(out, "improvement.csv"), improvement_csv(imp));
  write_json(join(out, "summary.json"), {{"succeeded", summary.succeeded}, {"failed", summary.failed}});
  return summary;
}

}  // namespace ebmlab::lab
