#include "ebmlab/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "ebmlab/error.hpp"
#include "ebmlab/io.hpp"

namespace ebmlab::data {

void LabeledTable::validate() const {
  if (!features.all_finite()) throw DataError(source + ": features contain non-finite values");
  if (!row_ids.empty() && row_ids.size() != rows()) {
    throw DataError(source + ": row id count does not match rows");
  }
  if (labeled()) {
    if (labels.size() != rows()) throw DataError(source + ": label count does not match rows");
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= class_count()) {
        throw DataError(source + ": label " + std::to_string(y) + " outside the class list");
      }
    }
  }
}

LabeledTable LabeledTable::take_rows(std::span<const std::size_t> idx) const {
  if (idx.empty()) throw DataError(source + ": selection is empty");
  LabeledTable out;
  out.features = features.take_rows(idx);
  out.class_names = class_names;
  out.feature_names = feature_names;
  out.source = source;
  for (auto i : idx) {
    if (labeled()) out.labels.push_back(labels[i]);
    out.row_ids.push_back(row_ids.empty() ? i : row_ids[i]);
  }
  return out;
}

LabeledTable unlabeled(Tensor features, std::string source) {
  LabeledTable t;
  t.features = std::move(features);
  t.source = std::move(source);
  t.row_ids.resize(t.rows());
  std::iota(t.row_ids.begin(), t.row_ids.end(), std::size_t{0});
  return t;
}

// ---- CSV -----------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_fields(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    out.push_back(trim(std::string_view(line).substr(start, pos - start)));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const char* first = s.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::vector<std::string> sorted_class_names(const std::set<std::string>& names) {
  std::vector<std::string> out(names.begin(), names.end());
  const bool numeric = std::all_of(out.begin(), out.end(),
                                   [](const std::string& s) { return parse_number(s).has_value(); });
  if (numeric) {
    std::stable_sort(out.begin(), out.end(), [](const std::string& a, const std::string& b) {
      return *parse_number(a) < *parse_number(b);
    });
  }
  return out;
}

}  // namespace

LabeledTable parse_csv(const std::string& text, const CsvSchema& schema, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    header = split_fields(t, schema.delimiter);
    break;
  }
  if (header.empty()) throw DataError(source + ": empty file (no header row)");

  std::optional<std::size_t> label_col;
  if (schema.label_column) {
    const auto it = std::find(header.begin(), header.end(), *schema.label_column);
    if (it == header.end()) {
      throw DataError(source + ": missing label column '" + *schema.label_column + "'");
    }
    label_col = static_cast<std::size_t>(it - header.begin());
  }
  LabeledTable table;
  table.source = source;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c != label_col) table.feature_names.push_back(header[c]);
  }
  const std::size_t d = table.feature_names.size();
  if (d == 0) throw DataError(source + ": no feature columns");

  std::vector<double> values;
  std::vector<std::string> raw_labels;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto fields = split_fields(t, schema.delimiter);
    if (fields.size() != header.size()) {
      throw DataError(source + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " fields, found " +
                      std::to_string(fields.size()));
    }
    for (std::size_t c = 0; c < fields.size(); ++c) {
      if (c == label_col) {
        if (fields[c].empty()) throw DataError(source + ":" + std::to_string(line_no) + ": empty label");
        raw_labels.push_back(fields[c]);
        continue;
      }
      const auto v = parse_number(fields[c]);
      if (!v || !std::isfinite(*v)) {
        throw DataError(source + ":" + std::to_string(line_no) + ": cannot parse '" + fields[c] +
                        "' in column '" + header[c] + "'");
      }
      values.push_back(*v);
    }
  }
  const std::size_t n = values.size() / d;
  if (n == 0) throw DataError(source + ": no data rows");
  table.features = Tensor({n, d}, std::move(values));
  table.row_ids.resize(n);
  std::iota(table.row_ids.begin(), table.row_ids.end(), std::size_t{0});
  if (label_col) {
    table.class_names = sorted_class_names(std::set<std::string>(raw_labels.begin(), raw_labels.end()));
    std::map<std::string, int> index;
    for (std::size_t k = 0; k < table.class_names.size(); ++k) index[table.class_names[k]] = static_cast<int>(k);
    for (const auto& s : raw_labels) table.labels.push_back(index.at(s));
  }
  table.validate();
  return table;
}

LabeledTable load_csv(const std::string& path, const CsvSchema& schema) {
  return parse_csv(io::read_text(path), schema, path);
}

std::string to_csv(const LabeledTable& table, const std::string& provenance) {
  std::string out = "# " + provenance + "\n";
  for (std::size_t j = 0; j < table.dim(); ++j) {
    if (j) out += ',';
    out += j < table.feature_names.size() ? table.feature_names[j] : "x" + std::to_string(j);
  }
  if (table.labeled()) out += ",class";
  out += '\n';
  for (std::size_t i = 0; i < table.rows(); ++i) {
    for (std::size_t j = 0; j < table.dim(); ++j) {
      if (j) out += ',';
      out += io::format_double(table.features(i, j));
    }
    if (table.labeled()) out += "," + table.class_names[static_cast<std::size_t>(table.labels[i])];
    out += '\n';
  }
  return out;
}

void write_csv(const std::string& path, const LabeledTable& table, const std::string& provenance) {
  io::write_text_atomic(path, to_csv(table, provenance));
}

// ---- splits ----------------------------------------------------------------------

Standardizer Standardizer::fit(const Tensor& x) {
  Standardizer s;
  const std::size_t n = x.rows(), d = x.cols();
  s.mean.assign(d, 0.0);
  s.stddev.assign(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += x(i, j);
    m /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) v += (x(i, j) - m) * (x(i, j) - m);
    s.mean[j] = m;
    s.stddev[j] = std::max(std::sqrt(v / static_cast<double>(n)), kFloor);
  }
  return s;
}

Tensor Standardizer::apply(const Tensor& x) const {
  if (x.cols() != mean.size()) throw ContractError("standardizer: dimension mismatch");
  Tensor z = x;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) = (x(i, j) - mean[j]) / stddev[j];
  }
  return z;
}

Tensor Standardizer::inverse(const Tensor& z) const {
  if (z.cols() != mean.size()) throw ContractError("standardizer: dimension mismatch");
  Tensor x = z;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) x(i, j) = z(i, j) * stddev[j] + mean[j];
  }
  return x;
}

namespace {

std::size_t round_count(double frac, std::size_t n) {
  return static_cast<std::size_t>(std::llround(frac * static_cast<double>(n)));
}

void check_fracs(const SplitOptions& o) {
  auto in01 = [](double f) { return f >= 0.0 && f <= 1.0; };
  if (!in01(o.ood_val_frac) || !in01(o.id_train_frac) || !in01(o.id_val_frac) ||
      o.id_train_frac + o.id_val_frac > 1.0) {
    throw ConfigError("split fractions must lie in [0, 1] with train + val <= 1");
  }
}

std::vector<std::size_t> shuffled(std::vector<std::size_t> idx, Rng& rng) {
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

LabeledTable part(const LabeledTable& t, std::span<const std::size_t> idx, const std::string& name) {
  if (idx.empty()) throw DataError(t.source + ": split part '" + name + "' would be empty");
  LabeledTable p = t.take_rows(idx);
  p.source = t.source + "/" + name;
  return p;
}

void split_id(const LabeledTable& id, const SplitOptions& o, Rng& rng, SplitBundle& b) {
  std::vector<std::size_t> all(id.rows());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto order = shuffled(all, rng);
  const std::size_t n_train = round_count(o.id_train_frac, order.size());
  const std::size_t n_val = std::min(round_count(o.id_val_frac, order.size()), order.size() - n_train);
  const std::span<const std::size_t> s(order);
  b.id_train = part(id, s.subspan(0, n_train), "id_train");
  b.id_val = part(id, s.subspan(n_train, n_val), "id_val");
  b.id_test = part(id, s.subspan(n_train + n_val), "id_test");
}

}  // namespace

SplitBundle class_removal_split(const LabeledTable& table,
                                const std::vector<std::string>& removed_classes,
                                const SplitOptions& options) {
  check_fracs(options);
  if (!table.labeled()) throw DataError(table.source + ": class removal needs labels");
  if (removed_classes.empty()) throw ConfigError("class_removal_split: no classes to remove");
  std::vector<bool> removed(table.class_count(), false);
  for (const auto& name : removed_classes) {
    const auto it = std::find(table.class_names.begin(), table.class_names.end(), name);
    if (it == table.class_names.end()) {
      throw ConfigError("class_removal_split: unknown class '" + name + "'");
    }
    removed[static_cast<std::size_t>(it - table.class_names.begin())] = true;
  }
  if (std::all_of(removed.begin(), removed.end(), [](bool r) { return r; })) {
    throw ConfigError("class_removal_split: removing every class leaves no ID data");
  }

  // Contiguous relabeling over kept classes, removed classes in their own list.
  std::vector<int> new_label(table.class_count(), -1);
  std::vector<std::string> kept_names, removed_names;
  for (std::size_t k = 0; k < table.class_count(); ++k) {
    auto& names = removed[k] ? removed_names : kept_names;
    new_label[k] = static_cast<int>(names.size());
    names.push_back(table.class_names[k]);
  }
  LabeledTable relabeled = table;
  if (relabeled.row_ids.empty()) {
    relabeled.row_ids.resize(table.rows());
    std::iota(relabeled.row_ids.begin(), relabeled.row_ids.end(), std::size_t{0});
  }
  std::vector<std::size_t> id_rows, ood_rows;
  for (std::size_t i = 0; i < table.rows(); ++i) {
    const auto k = static_cast<std::size_t>(table.labels[i]);
    relabeled.labels[i] = new_label[k];
    (removed[k] ? ood_rows : id_rows).push_back(i);
  }

  Rng rng = make_stream(options.seed, Stream::kData);
  SplitBundle b;
  LabeledTable id = relabeled.take_rows(id_rows);
  id.class_names = kept_names;
  split_id(id, options, rng, b);

  LabeledTable ood = relabeled.take_rows(ood_rows);
  ood.class_names = removed_names;
  std::vector<std::size_t> all(ood.rows());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto order = shuffled(all, rng);
  const std::size_t n_val = round_count(options.ood_val_frac, order.size());
  const std::span<const std::size_t> s(order);
  b.ood_val = part(ood, s.subspan(0, n_val), "ood_val");
  b.ood_test = part(ood, s.subspan(n_val), "ood_test");
  return b;
}

SplitBundle id_only_split(const LabeledTable& table, const SplitOptions& options) {
  check_fracs(options);
  LabeledTable t = table;
  if (t.row_ids.empty()) {
    t.row_ids.resize(t.rows());
    std::iota(t.row_ids.begin(), t.row_ids.end(), std::size_t{0});
  }
  Rng rng = make_stream(options.seed, Stream::kData);
  SplitBundle b;
  split_id(t, options, rng, b);
  return b;
}

SplitBundle standardize(SplitBundle b) {
  const Standardizer s = Standardizer::fit(b.id_train.features);
  for (LabeledTable* t : {&b.id_train, &b.id_val, &b.id_test}) t->features = s.apply(t->features);
  for (auto* t : {&b.ood_val, &b.ood_test}) {
    if (*t) (*t)->features = s.apply((*t)->features);
  }
  b.stats = s;
  return b;
}

SplitBundle embed_dataset(const models::ModelSpec& spec, const models::ParameterSet& params,
                          const SplitBundle& bundle) {
  SplitBundle out = bundle;
  auto embed = [&](LabeledTable& t) {
    t.features = models::classifier_embed(spec, params, t.features);
    t.feature_names.clear();
  };
  embed(out.id_train);
  embed(out.id_val);
  embed(out.id_test);
  if (out.ood_val) embed(*out.ood_val);
  if (out.ood_test) embed(*out.ood_test);
  out.stats.reset();
  return out;
}

// ---- generators -------------------------------------------------------------------

Tensor make_noise(std::size_t n, std::size_t d, Rng& rng, std::vector<bool>* gaussian_rows) {
  const std::size_t n_gauss = (n + 1) / 2;
  Tensor raw({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) raw(i, j) = i < n_gauss ? normal(rng) : uniform(rng, -1.0, 1.0);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  if (gaussian_rows) {
    gaussian_rows->resize(n);
    for (std::size_t i = 0; i < n; ++i) (*gaussian_rows)[i] = order[i] < n_gauss;
  }
  return raw.take_rows(order);
}

Tensor make_constant(std::size_t n, std::size_t d, Rng& rng) {
  Tensor x({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const double v = uniform(rng, -1.0, 1.0);
    for (std::size_t j = 0; j < d; ++j) x(i, j) = v;
  }
  return x;
}

Tensor make_oodomain(const Tensor& standardized) {
  Tensor x = standardized;
  for (auto& v : x.values()) v *= 255.0;
  return x;
}

Tensor make_oodomain_image(const Tensor& pixels) {
  Tensor x = pixels;
  for (auto& v : x.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("oodomain image mode expects pixels in [0, 1]");
    v = std::round(255.0 * v);
  }
  return x;
}

std::vector<double> pool_upsample(std::span<const double> image, std::size_t side, std::size_t pool) {
  if (pool < 1 || side % pool != 0) {
    throw ConfigError("pool size " + std::to_string(pool) + " does not divide image side " +
                      std::to_string(side));
  }
  if (image.size() != side * side) throw ContractError("pool_upsample: image is not side x side");
  std::vector<double> out(image.size());
  const double area = static_cast<double>(pool * pool);
  for (std::size_t bi = 0; bi < side; bi += pool) {
    for (std::size_t bj = 0; bj < side; bj += pool) {
      // Offsets from the first pixel keep constant windows exact.
      const double base = image[bi * side + bj];
      double s = 0.0;
      for (std::size_t i = bi; i < bi + pool; ++i) {
        for (std::size_t j = bj; j < bj + pool; ++j) s += image[i * side + j] - base;
      }
      const double m = base + s / area;
      for (std::size_t i = bi; i < bi + pool; ++i) {
        for (std::size_t j = bj; j < bj + pool; ++j) out[i * side + j] = m;
      }
    }
  }
  return out;
}

Tensor make_smoothness(std::size_t n, std::size_t side, std::size_t pool, Rng& rng) {
  if (pool < 1 || side % pool != 0) {
    throw ConfigError("pool size " + std::to_string(pool) + " does not divide image side " +
                      std::to_string(side));
  }
  Tensor x({n, side * side});
  std::vector<double> img(side * side);
  for (std::size_t r = 0; r < n; ++r) {
    for (auto& v : img) v = uniform(rng);
    const auto pooled = pool_upsample(img, side, pool);
    std::copy(pooled.begin(), pooled.end(), x.row_span(r).begin());
  }
  return x;
}

LabeledTable make_two_moons(std::size_t n, double noise_std, Rng& rng) {
  if (n < 2) throw ConfigError("two-moons needs at least 2 points");
  const std::size_t n_out = n / 2, n_in = n - n_out;
  Tensor raw({n, 2});
  std::vector<int> labels(n);
  auto angle = [](std::size_t i, std::size_t m) {
    return m == 1 ? 0.0 : std::numbers::pi * static_cast<double>(i) / static_cast<double>(m - 1);
  };
  for (std::size_t i = 0; i < n_out; ++i) {
    const double t = angle(i, n_out);
    raw(i, 0) = std::cos(t);
    raw(i, 1) = std::sin(t);
    labels[i] = 0;
  }
  for (std::size_t i = 0; i < n_in; ++i) {
    const double t = angle(i, n_in);
    raw(n_out + i, 0) = 1.0 - std::cos(t);
    raw(n_out + i, 1) = 0.5 - std::sin(t);
    labels[n_out + i] = 1;
  }
  if (noise_std > 0.0) {
    for (auto& v : raw.values()) v += normal(rng, 0.0, noise_std);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  LabeledTable t;
  t.features = raw.take_rows(order);
  for (auto i : order) t.labels.push_back(labels[i]);
  t.class_names = {"0", "1"};
  t.feature_names = {"x0", "x1"};
  t.source = "two-moons";
  t.row_ids.resize(n);
  std::iota(t.row_ids.begin(), t.row_ids.end(), std::size_t{0});
  return t;
}

LabeledTable make_blobs(std::size_t n, std::size_t d, std::size_t classes, double spread, Rng& rng) {
  if (classes < 1 || n < classes) throw ConfigError("blobs: need n >= classes >= 1");
  std::vector<std::vector<double>> centers(classes, std::vector<double>(d));
  for (auto& c : centers) {
    for (auto& v : c) v = normal(rng, 0.0, spread);
  }
  LabeledTable t;
  t.features = Tensor({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % classes;
    for (std::size_t j = 0; j < d; ++j) t.features(i, j) = centers[k][j] + normal(rng);
    t.labels.push_back(static_cast<int>(k));
  }
  for (std::size_t k = 0; k < classes; ++k) t.class_names.push_back(std::to_string(k));
  for (std::size_t j = 0; j < d; ++j) t.feature_names.push_back("x" + std::to_string(j));
  t.source = "blobs";
  t.row_ids.resize(n);
  std::iota(t.row_ids.begin(), t.row_ids.end(), std::size_t{0});
  return t;
}

LabeledTable make_gratings(std::size_t n, std::size_t side, std::size_t classes, double noise_std,
                           Rng& rng) {
  if (classes < 1 || n < classes || side < 2) {
    throw ConfigError("gratings: need n >= classes >= 1 and side >= 2");
  }
  const double pi = std::numbers::pi;
  LabeledTable t;
  t.features = Tensor({n, side * side});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % classes;
    const double theta = pi * static_cast<double>(k) / static_cast<double>(classes) +
                         uniform(rng, -0.1, 0.1) * pi / static_cast<double>(classes);
    const double freq = uniform(rng, 1.5, 3.0) / static_cast<double>(side);
    const double phase = uniform(rng, 0.0, 2.0 * pi);
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t c = 0; c < side; ++c) {
        const double u = static_cast<double>(c) * std::cos(theta) + static_cast<double>(r) * std::sin(theta);
        const double v = 0.5 + 0.5 * std::sin(2.0 * pi * freq * u + phase) + normal(rng, 0.0, noise_std);
        t.features(i, r * side + c) = std::clamp(v, 0.0, 1.0);
      }
    }
    t.labels.push_back(static_cast<int>(k));
  }
  for (std::size_t k = 0; k < classes; ++k) t.class_names.push_back(std::to_string(k));
  for (std::size_t j = 0; j < side * side; ++j) t.feature_names.push_back("p" + std::to_string(j));
  t.source = "gratings";
  t.row_ids.resize(n);
  std::iota(t.row_ids.begin(), t.row_ids.end(), std::size_t{0});
  return t;
}

}  // namespace ebmlab::data
