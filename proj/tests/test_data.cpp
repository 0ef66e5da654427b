#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "doctest.h"
#include "ebmlab/data.hpp"
#include "ebmlab/error.hpp"
#include "ebmlab/io.hpp"
#include "ebmlab/objectives.hpp"
#include "ebmlab/optim.hpp"
#include "test_support.hpp"

using namespace ebmlab;
using testing::TempDir;
namespace fs = std::filesystem;

namespace {

data::LabeledTable toy_table(std::size_t per_class, std::size_t classes) {
  data::LabeledTable t;
  t.features = Tensor({per_class * classes, 2});
  for (std::size_t i = 0; i < per_class * classes; ++i) {
    t.features(i, 0) = static_cast<double>(i);
    t.features(i, 1) = static_cast<double>(i % classes);
    t.labels.push_back(static_cast<int>(i % classes));
  }
  for (std::size_t k = 0; k < classes; ++k) t.class_names.push_back("c" + std::to_string(k));
  t.source = "toy";
  t.row_ids.resize(t.rows());
  std::iota(t.row_ids.begin(), t.row_ids.end(), std::size_t{0});
  return t;
}

// Full-batch Adam on cross-entropy; returns parameters.
models::ParameterSet fit_classifier(const models::ModelSpec& spec, const Tensor& x,
                                    const std::vector<int>& y, int steps, double lr,
                                    std::uint64_t seed) {
  auto params = models::initialize(spec, seed);
  Adam adam(params.size());
  for (int s = 0; s < steps; ++s) {
    ad::Trace t;
    const auto leaves = models::bind(t, params, true);
    const auto logits = models::forward(t, spec, leaves, t.constant(x));
    const auto grad = models::flatten(t.grad_wrt(objectives::ce_loss(t, logits, y), leaves));
    adam.step(params.values, grad, lr);
  }
  return params;
}

double accuracy(const models::ModelSpec& spec, const models::ParameterSet& p, const Tensor& x,
                const std::vector<int>& y) {
  const Tensor l = models::logits(spec, p, x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = l.row_vector(i);
    hit += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == y[i];
  }
  return static_cast<double>(hit) / static_cast<double>(x.rows());
}

}  // namespace

TEST_CASE("csv with a class column") {
  const std::string text = "# generated\na,b,class\n1,2,x\n3,4.5,y\n-1,0,x\n";
  const auto t = data::parse_csv(text, {}, "mem");
  CHECK(t.rows() == 3);
  CHECK(t.dim() == 2);
  CHECK(t.labels == std::vector<int>{0, 1, 0});
  CHECK(t.class_names == std::vector<std::string>{"x", "y"});
  CHECK(t.features(1, 1) == 4.5);
}

TEST_CASE("numeric class names sort numerically") {
  const std::string text = "f,class\n0,10\n1,2\n2,11\n";
  const auto t = data::parse_csv(text, {}, "mem");
  CHECK(t.class_names == std::vector<std::string>{"2", "10", "11"});
  CHECK(t.labels == std::vector<int>{1, 0, 2});
}

TEST_CASE("csv errors name the line") {
  try {
    data::parse_csv("a,class\n1,x\n2,y\nbad,x\n", {}, "mem");
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("mem:4") != std::string::npos);
  }
  CHECK_THROWS_AS(data::parse_csv("a,b\n1,2\n", {}, "mem"), DataError);
  CHECK_THROWS_AS(data::parse_csv("", {}, "mem"), DataError);
  CHECK_THROWS_AS(data::parse_csv("# only a comment\n", {}, "mem"), DataError);
  CHECK_THROWS_AS(data::parse_csv("a,class\n", {}, "mem"), DataError);
  CHECK_THROWS_AS(data::parse_csv("a,class\n1,x,3\n", {}, "mem"), DataError);
  CHECK_THROWS_AS(data::parse_csv("a,class\nnan,x\n", {}, "mem"), DataError);
}

TEST_CASE("csv shape is read from the file") {
  // 19 feature columns, 7 classes, like the segmentation table.
  std::string text;
  for (int j = 0; j < 19; ++j) text += "f" + std::to_string(j) + ",";
  text += "class\n";
  for (int i = 0; i < 70; ++i) {
    for (int j = 0; j < 19; ++j) text += std::to_string(i * j % 13) + ",";
    text += "k" + std::to_string(i % 7) + "\n";
  }
  const auto t = data::parse_csv(text, {}, "seg");
  CHECK(t.dim() == 19);
  CHECK(t.class_count() == 7);
  CHECK(t.rows() == 70);
}

TEST_CASE("csv round trip through a file") {
  TempDir dir;
  Rng rng(1);
  auto t = data::make_two_moons(50, 0.1, rng);
  const auto path = (dir.path / "moons.csv").string();
  data::write_csv(path, t, "two-moons n=50 seed=1");
  CHECK(io::read_text(path).rfind("# two-moons n=50 seed=1\n", 0) == 0);
  const auto back = data::load_csv(path);
  CHECK(back.features == t.features);
  CHECK(back.labels == t.labels);
  CHECK(back.class_names == t.class_names);

  data::CsvSchema unlabeled;
  unlabeled.label_column.reset();
  const auto raw = data::parse_csv("a,b\n1,2\n", unlabeled, "mem");
  CHECK_FALSE(raw.labeled());
}

TEST_CASE("class removal leaves the retained classes") {
  const auto t = toy_table(40, 3);
  const auto b = data::class_removal_split(t, {"c1"});
  for (const auto* p : {&b.id_train, &b.id_val, &b.id_test}) {
    CHECK(p->class_names == std::vector<std::string>{"c0", "c2"});
    for (int y : p->labels) CHECK((y == 0 || y == 1));
  }
  REQUIRE(b.ood_val);
  CHECK(b.ood_val->class_names == std::vector<std::string>{"c1"});
  // relabeled ID rows still match their original class through the features
  for (std::size_t i = 0; i < b.id_train.rows(); ++i) {
    const int original = static_cast<int>(b.id_train.features(i, 1));
    CHECK(b.id_train.class_names[static_cast<std::size_t>(b.id_train.labels[i])] ==
          "c" + std::to_string(original));
  }
}

TEST_CASE("ood validation gets ten percent of removed rows") {
  const auto t = toy_table(100, 2);
  const auto b = data::class_removal_split(t, {"c0"});
  CHECK(b.ood_val->rows() == 10);
  CHECK(b.ood_test->rows() == 90);
  CHECK(b.id_train.rows() == 70);
  CHECK(b.id_val.rows() == 10);
  CHECK(b.id_test.rows() == 20);
}

TEST_CASE("class removal is a reproducible partition") {
  const auto t = toy_table(37, 4);
  data::SplitOptions o;
  o.seed = 99;
  const auto b = data::class_removal_split(t, {"c3", "c0"}, o);
  std::multiset<std::size_t> ids;
  for (const auto* p : {&b.id_train, &b.id_val, &b.id_test, &*b.ood_val, &*b.ood_test}) {
    ids.insert(p->row_ids.begin(), p->row_ids.end());
    for (std::size_t i = 0; i < p->rows(); ++i) CHECK(p->features(i, 0) == static_cast<double>(p->row_ids[i]));
  }
  CHECK(ids.size() == t.rows());
  CHECK(std::set<std::size_t>(ids.begin(), ids.end()).size() == t.rows());

  const auto again = data::class_removal_split(t, {"c3", "c0"}, o);
  CHECK(again.id_train.row_ids == b.id_train.row_ids);
  CHECK(again.ood_test->row_ids == b.ood_test->row_ids);
  o.seed = 100;
  CHECK(data::class_removal_split(t, {"c3", "c0"}, o).id_train.row_ids != b.id_train.row_ids);
}

TEST_CASE("class removal errors") {
  const auto t = toy_table(10, 2);
  CHECK_THROWS_AS(data::class_removal_split(t, {"c0", "c1"}), ConfigError);
  CHECK_THROWS_AS(data::class_removal_split(t, {"nope"}), ConfigError);
  CHECK_THROWS_AS(data::class_removal_split(t, {}), ConfigError);
}

TEST_CASE("standardization") {
  Rng rng(2);
  auto t = data::make_blobs(300, 3, 3, 4.0, rng);
  for (std::size_t i = 0; i < t.rows(); ++i) t.features(i, 2) = 7.0;  // constant column
  const auto raw = data::class_removal_split(t, {"2"});
  const auto b = data::standardize(raw);
  REQUIRE(b.stats);
  for (std::size_t j = 0; j < 3; ++j) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < b.id_train.rows(); ++i) m += b.id_train.features(i, j);
    m /= static_cast<double>(b.id_train.rows());
    for (std::size_t i = 0; i < b.id_train.rows(); ++i) v += std::pow(b.id_train.features(i, j) - m, 2);
    CHECK(std::abs(m) < 1e-12);
    if (j < 2) CHECK(std::sqrt(v / static_cast<double>(b.id_train.rows())) == doctest::Approx(1.0));
  }
  CHECK(b.ood_test->features.all_finite());
  CHECK(b.stats->stddev[2] == data::Standardizer::kFloor);
  const Tensor back = b.stats->inverse(b.ood_test->features);
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(std::abs(back.values()[i] - raw.ood_test->features.values()[i]) < 1e-12);
  }
}

TEST_CASE("noise generator") {
  Rng rng(3);
  std::vector<bool> gauss;
  const Tensor x = data::make_noise(1000, 4, rng, &gauss);
  CHECK(std::count(gauss.begin(), gauss.end(), true) == 500);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (gauss[i]) continue;
    for (double v : x.row_vector(i)) CHECK((v >= -1.0 && v <= 1.0));
  }
  const Tensor odd = data::make_noise(7, 1, rng, &gauss);
  CHECK(std::count(gauss.begin(), gauss.end(), true) == 4);

  const Tensor big = data::make_noise(20000, 3, rng, &gauss);
  for (std::size_t j = 0; j < 3; ++j) {
    double s = 0.0, s2 = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < big.rows(); ++i) {
      if (!gauss[i]) continue;
      s += big(i, j);
      s2 += big(i, j) * big(i, j);
      ++n;
    }
    const double var = s2 / n - (s / n) * (s / n);
    CHECK(var >= 0.9);
    CHECK(var <= 1.1);
  }
  // shuffled: origins are interleaved
  CHECK_FALSE(std::is_sorted(gauss.begin(), gauss.end(), std::greater<>()));
}

TEST_CASE("constant generator") {
  Rng rng(4);
  const Tensor x = data::make_constant(100, 5, rng);
  std::set<double> firsts;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row_vector(i);
    CHECK(std::all_of(row.begin(), row.end(), [&](double v) { return v == row[0]; }));
    CHECK((row[0] >= -1.0 && row[0] <= 1.0));
    firsts.insert(row[0]);
  }
  CHECK(firsts.size() == 100);
}

TEST_CASE("oodomain scaling") {
  const Tensor x = Tensor::row({0.1, -0.2});
  const Tensor y = data::make_oodomain(x);
  CHECK(y(0, 0) == doctest::Approx(25.5).epsilon(1e-15));
  CHECK(y(0, 1) == doctest::Approx(-51.0).epsilon(1e-15));
  Rng rng(5);
  const Tensor z = normal_tensor(rng, 20, 3);
  double in_max = 0.0, out_max = 0.0;
  const Tensor w = data::make_oodomain(z);
  for (double v : z.values()) in_max = std::max(in_max, std::abs(v));
  for (double v : w.values()) out_max = std::max(out_max, std::abs(v));
  CHECK(out_max == 255.0 * in_max);

  const Tensor img = data::make_oodomain_image(Tensor::row({0.0, 0.5, 1.0, 0.2}));
  CHECK(img.values() == std::vector<double>{0.0, 128.0, 255.0, 51.0});
  CHECK_THROWS_AS(data::make_oodomain_image(Tensor::row({1.5})), DataError);
}

TEST_CASE("smoothness ladder basics") {
  const std::vector<double> img = {0, 1, 0, 1};
  CHECK(data::pool_upsample(img, 2, 2) == std::vector<double>{0.5, 0.5, 0.5, 0.5});

  Rng a(6), b(6);
  const Tensor pooled = data::make_smoothness(3, 16, 1, a);
  const Tensor noise = uniform_tensor(b, 1, 16 * 16 * 3, 0.0, 1.0);
  CHECK(pooled.values() == noise.values());

  const std::vector<double> flat(256, 0.37);
  for (std::size_t p : {1, 2, 4, 8, 16}) CHECK(data::pool_upsample(flat, 16, p) == flat);
  CHECK_THROWS_AS(data::make_smoothness(1, 16, 3, a), ConfigError);
}

TEST_CASE("smoothness variance is non-increasing in pool size") {
  Rng rng(7);
  double prev = 1.0;
  for (std::size_t p : {1, 2, 4, 8, 16}) {
    const Tensor x = data::make_smoothness(1000, 16, p, rng);
    double mean_var = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const auto row = x.row_vector(r);
      const double m = std::accumulate(row.begin(), row.end(), 0.0) / row.size();
      double v = 0.0;
      for (double u : row) v += (u - m) * (u - m);
      mean_var += v / row.size();
    }
    mean_var /= x.rows();
    CHECK(mean_var <= prev);
    prev = mean_var;
  }
  CHECK(prev < 1e-24);  // pool 16 leaves one constant window
}

TEST_CASE("two moons without noise lie on unit half circles") {
  Rng rng(8);
  const auto t = data::make_two_moons(101, 0.0, rng);
  CHECK(std::count(t.labels.begin(), t.labels.end(), 0) == 50);
  CHECK(std::count(t.labels.begin(), t.labels.end(), 1) == 51);
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const double cx = t.labels[i] == 0 ? 0.0 : 1.0;
    const double cy = t.labels[i] == 0 ? 0.0 : 0.5;
    CHECK(std::abs(std::hypot(t.features(i, 0) - cx, t.features(i, 1) - cy) - 1.0) < 1e-12);
    CHECK((t.labels[i] == 0 ? t.features(i, 1) >= -1e-12 : t.features(i, 1) <= 0.5 + 1e-12));
  }
  const auto even = data::make_two_moons(2000, 0.1, rng);
  CHECK(std::count(even.labels.begin(), even.labels.end(), 0) == 1000);
}

TEST_CASE("two moons are separable by a small classifier") {
  Rng rng(9);
  const auto train = data::make_two_moons(2000, 0.1, rng);
  const auto test = data::make_two_moons(2000, 0.1, rng);
  models::ModelSpec spec;
  spec.input_dim = 2;
  spec.hidden = {32, 32};
  spec.head = models::HeadKind::kLogits;
  spec.classes = 2;
  const auto p = fit_classifier(spec, train.features, train.labels, 300, 1e-2, 10);
  CHECK(accuracy(spec, p, test.features, test.labels) >= 0.95);
}

TEST_CASE("embedding keeps rows and two moons stay linearly separable") {
  Rng rng(11);
  const auto table = data::make_two_moons(2000, 0.1, rng);
  const auto bundle = data::id_only_split(table);
  models::ModelSpec spec;
  spec.input_dim = 2;
  spec.hidden = {32, 16};
  spec.head = models::HeadKind::kLogits;
  spec.classes = 2;
  const auto p = fit_classifier(spec, bundle.id_train.features, bundle.id_train.labels, 300, 1e-2, 12);
  const auto emb = data::embed_dataset(spec, p, bundle);
  CHECK(emb.id_train.rows() == bundle.id_train.rows());
  CHECK(emb.id_test.dim() == 16);
  CHECK(emb.id_test.labels == bundle.id_test.labels);
  CHECK(data::embed_dataset(spec, p, bundle).id_test.features == emb.id_test.features);

  // linear probes: logistic regression on raw inputs vs on embeddings
  auto probe = [&](const data::LabeledTable& tr, const data::LabeledTable& te) {
    models::ModelSpec lin;
    lin.input_dim = tr.dim();
    lin.head = models::HeadKind::kLogits;
    lin.classes = 2;
    const auto lp = fit_classifier(lin, tr.features, tr.labels, 300, 5e-2, 13);
    return accuracy(lin, lp, te.features, te.labels);
  };
  const double raw = probe(bundle.id_train, bundle.id_test);
  const double embedded = probe(emb.id_train, emb.id_test);
  MESSAGE("probe accuracy raw " << raw << ", embedded " << embedded);
  CHECK(embedded >= raw - 0.05);
}

TEST_CASE("generators are seed-deterministic") {
  Rng a(14), b(14);
  CHECK(data::make_noise(50, 3, a) == data::make_noise(50, 3, b));
  CHECK(data::make_constant(50, 3, a) == data::make_constant(50, 3, b));
  CHECK(data::make_smoothness(5, 8, 2, a) == data::make_smoothness(5, 8, 2, b));
  CHECK(data::make_two_moons(50, 0.1, a).features == data::make_two_moons(50, 0.1, b).features);
  CHECK(data::make_blobs(50, 3, 4, 2.0, a).features == data::make_blobs(50, 3, 4, 2.0, b).features);
}
