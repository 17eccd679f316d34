#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "parafill/checkpoint.hpp"
#include "parafill/hash.hpp"
#include "parafill/model.hpp"
#include "parafill/types.hpp"

using namespace parafill;
using namespace parafill::model;

namespace {

ModelConfig tiny(int layers = 2, int d = 16, int vocab = 13, int block = 12) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = 2;
  c.d_model = d;
  c.block_size = block;
  c.vocab_size = vocab;
  c.dropout = 0.0;
  return c;
}

struct Input {
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> segs;
  Sequence seq() const { return {ids, segs}; }
};

Input random_input(std::mt19937_64& rng, const ModelConfig& c, std::size_t n) {
  Input in;
  for (std::size_t i = 0; i < n; ++i) {
    in.ids.push_back(static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(c.vocab_size)));
    in.segs.push_back(static_cast<std::uint8_t>(rng() % static_cast<std::uint64_t>(c.n_segments)));
  }
  return in;
}

// Independent row-wise LayerNorm.
Eigen::VectorXd layer_norm(const Eigen::VectorXd& x, const Eigen::VectorXd& g, const Eigen::VectorXd& b) {
  const double mean = x.mean();
  const double var = (x.array() - mean).square().mean();
  return ((x.array() - mean) / std::sqrt(var + 1e-5) * g.array() + b.array()).matrix();
}

template <class T>
Eigen::VectorXd slice(const Transformer<T>& m, std::size_t offset, std::size_t n) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) v(static_cast<Eigen::Index>(i)) = m.params()[offset + i];
  return v;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "parafill_test_model";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = tiny();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), UsageError);
  nlohmann::json j = tiny();
  ModelConfig back;
  from_json(j, back);
  CHECK(back == tiny());
}

TEST_CASE("layout has no separate output head") {
  Layout lay(tiny());
  for (const auto& t : lay.tensors()) CHECK(t.name.find("head") == std::string::npos);
  CHECK(lay.find("wte").rows == 13);
  CHECK(lay.find("wte").decay);
  std::size_t sum = 0;
  for (const auto& t : lay.tensors()) sum += t.size();
  CHECK(sum == lay.total());
}

TEST_CASE("zero-layer model matches the closed form with a tied head") {
  auto c = tiny(0, 8, 11, 6);
  Transformer<double> m(c);
  m.init(3);
  // non-trivial LayerNorm parameters so they are exercised
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 0.3);
  for (std::size_t i = 0; i < 8; ++i) {
    m.params()[m.layout().lnf_g + i] = 1.0 + n(rng);
    m.params()[m.layout().lnf_b + i] = n(rng);
  }
  auto in = random_input(rng, c, 6);
  auto logits = m.forward(in.seq());
  const auto g = slice(m, m.layout().lnf_g, 8);
  const auto b = slice(m, m.layout().lnf_b, 8);
  for (std::size_t t = 0; t < 6; ++t) {
    Eigen::VectorXd x = slice(m, m.layout().wte + static_cast<std::size_t>(in.ids[t]) * 8, 8) +
                        slice(m, m.layout().wpe + t * 8, 8) +
                        slice(m, m.layout().wse + static_cast<std::size_t>(in.segs[t]) * 8, 8);
    const Eigen::VectorXd h = layer_norm(x, g, b);
    for (int v = 0; v < 11; ++v) {
      const double expected = h.dot(slice(m, m.layout().wte + static_cast<std::size_t>(v) * 8, 8));
      CHECK(logits(static_cast<Eigen::Index>(t), v) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("attention is causal") {
  auto c = tiny();
  Transformer<double> m(c);
  m.init(5);
  std::mt19937_64 rng(2);
  auto in = random_input(rng, c, 10);
  const auto base = m.forward(in.seq());
  for (std::size_t t = 1; t < 10; ++t) {
    auto changed = in;
    changed.ids[t] = (changed.ids[t] + 1) % c.vocab_size;
    changed.segs[t] = static_cast<std::uint8_t>((changed.segs[t] + 1) % c.n_segments);
    const auto out = m.forward(changed.seq());
    CHECK((out.topRows(static_cast<Eigen::Index>(t)) - base.topRows(static_cast<Eigen::Index>(t))).cwiseAbs().maxCoeff() == 0.0);
    CHECK((out.row(static_cast<Eigen::Index>(t)) - base.row(static_cast<Eigen::Index>(t))).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("masked loss normalizes and zeroes masked rows exactly") {
  RowMatrix<double> logits(4, 5);
  logits << 1, 2, 3, 4, 5, 0, 0, 0, 0, 0, -1, 3, 0.5, 2, 9, 4, 4, 1, 0, -2;
  const std::vector<std::int32_t> targets{4, 0, 2, 1};
  const std::vector<std::uint8_t> mask{1, 0, 1, 0};
  RowMatrix<double> grad;
  const double loss = masked_loss(logits, targets, mask, &grad);
  auto nll = [&](int r) {
    double z = 0;
    for (int v = 0; v < 5; ++v) z += std::exp(logits(r, v));
    return std::log(z) - logits(r, targets[static_cast<std::size_t>(r)]);
  };
  CHECK(loss == doctest::Approx((nll(0) + nll(2)) / 2.0).epsilon(1e-12));
  for (int v = 0; v < 5; ++v) {
    CHECK(grad(1, v) == 0.0);
    CHECK(grad(3, v) == 0.0);
  }
  // softmax rows of the gradient sum to zero
  CHECK(std::abs(grad.row(0).sum()) < 1e-12);
  CHECK_THROWS_AS(masked_loss(logits, targets, std::vector<std::uint8_t>(4, 0)), DataError);
}

TEST_CASE("analytic gradient matches central differences") {
  auto c = tiny(2, 16, 13, 12);
  Transformer<double> m(c);
  m.init(7);
  std::mt19937_64 rng(4);
  // perturb LayerNorm and bias terms away from their trivial init
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto& p : m.params()) p += n(rng);
  auto in = random_input(rng, c, 12);
  std::vector<std::uint8_t> mask(12);
  for (auto& x : mask) x = rng() % 2;
  mask[5] = 1;

  ParamVector<double> grad(m.params().size(), 0.0);
  const auto base = m.loss_and_grad(in.seq(), mask, &grad, 1.0, nullptr);
  REQUIRE(base.count > 0);

  double worst = 0.0;
  const double h = 1e-6;
  for (int k = 0; k < 100; ++k) {
    const std::size_t i = rng() % m.params().size();
    const double saved = m.params()[i];
    m.params()[i] = saved + h;
    const double up = m.loss(in.seq(), mask).nll;
    m.params()[i] = saved - h;
    const double down = m.loss(in.seq(), mask).nll;
    m.params()[i] = saved;
    const double numeric = (up - down) / (2 * h);
    const double denom = std::max({std::abs(numeric), std::abs(grad[i]), 1e-6});
    worst = std::max(worst, std::abs(numeric - grad[i]) / denom);
  }
  CHECK(worst <= 1e-3);
}

TEST_CASE("unmasked targets contribute no gradient") {
  auto c = tiny();
  Transformer<double> m(c);
  m.init(9);
  std::mt19937_64 rng(6);
  auto in = random_input(rng, c, 8);
  std::vector<std::uint8_t> mask(8, 0);
  mask[4] = 1;
  ParamVector<double> g1(m.params().size(), 0.0), g2(m.params().size(), 0.0);
  m.loss_and_grad(in.seq(), mask, &g1, 1.0, nullptr);
  auto changed = in;
  changed.ids[7] = (changed.ids[7] + 3) % c.vocab_size;  // target of a masked-out row, never an input before 4
  m.loss_and_grad(changed.seq(), mask, &g2, 1.0, nullptr);
  CHECK(g1 == g2);
}

TEST_CASE("initial loss is close to uniform") {
  auto c = tiny(2, 32, 512, 64);
  Transformer<float> m(c);
  m.init(0);
  std::mt19937_64 rng(8);
  auto in = random_input(rng, c, 64);
  std::vector<std::uint8_t> mask(64, 1);
  const auto l = m.loss(in.seq(), mask);
  CHECK(l.nll / static_cast<double>(l.count) == doctest::Approx(std::log(512.0)).epsilon(0.05));
}

TEST_CASE("init is deterministic per seed") {
  Transformer<float> a(tiny()), b(tiny()), d(tiny());
  a.init(1);
  b.init(1);
  d.init(2);
  CHECK(a.params() == b.params());
  CHECK(a.params() != d.params());
}

TEST_CASE("session logits match the full forward pass") {
  auto c = tiny();
  Transformer<double> m(c);
  m.init(11);
  std::mt19937_64 rng(10);
  auto in = random_input(rng, c, 12);
  const auto full = m.forward(in.seq());
  auto s = m.start(Sequence{std::span(in.ids).first(3), std::span(in.segs).first(3)});
  for (std::size_t t = 3;; ++t) {
    for (int v = 0; v < c.vocab_size; ++v) CHECK(s.logits()[static_cast<std::size_t>(v)] == doctest::Approx(full(static_cast<Eigen::Index>(t - 1), v)).epsilon(1e-10));
    if (t == 12) break;
    s.advance(in.ids[t], in.segs[t]);
  }
  CHECK_THROWS_AS(s.advance(0, 0), DataError);
}

TEST_CASE("inputs outside the model are rejected") {
  auto c = tiny();
  Transformer<float> m(c);
  m.init(0);
  Input in{{1, 2, 99}, {0, 0, 0}};
  CHECK_THROWS_AS(m.forward(in.seq()), DataError);
  Input seg{{1, 2}, {0, 7}};
  CHECK_THROWS_AS(m.forward(seg.seq()), DataError);
  Input too_long{std::vector<std::int32_t>(13, 1), std::vector<std::uint8_t>(13, 0)};
  CHECK_THROWS_AS(m.forward(too_long.seq()), DataError);
}

TEST_CASE("checkpoint round-trips exactly") {
  Transformer<float> m(tiny());
  m.init(21);
  const auto path = temp_path("round.ckpt");
  checkpoint::save(path, m, "abc", {{"format", "plain"}});
  auto back = checkpoint::load(path, std::string("abc"));
  CHECK(back.config == m.config());
  CHECK(back.params == m.params());
  CHECK(back.meta["format"] == "plain");
  CHECK(back.to_model().params() == m.params());
  CHECK_THROWS_WITH_AS(checkpoint::load(path, std::string("xyz")), doctest::Contains("vocabulary hash mismatch"), DataError);
}

TEST_CASE("corrupted and skewed checkpoints are rejected") {
  Transformer<float> m(tiny());
  m.init(22);
  checkpoint::Checkpoint ck{m.config(), "h", nlohmann::json::object(), m.params()};
  const auto bytes = checkpoint::serialize(ck);

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  CHECK_THROWS_WITH_AS(checkpoint::deserialize(flipped), doctest::Contains("checksum mismatch"), DataError);
  CHECK_THROWS_AS(checkpoint::deserialize(bytes.substr(0, bytes.size() - 10)), DataError);
  CHECK_THROWS_AS(checkpoint::deserialize(bytes.substr(0, 12)), DataError);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(checkpoint::deserialize(bad_magic), doctest::Contains("bad magic"), DataError);

  // a well-formed file from a future format version
  std::string body = bytes.substr(0, bytes.size() - 64);
  body[8] = 2;
  CHECK_THROWS_WITH_AS(checkpoint::deserialize(body + sha256_hex(body)), doctest::Contains("format version 2"), DataError);
}

TEST_CASE("softmax of every logit row sums to one") {
  auto c = tiny();
  Transformer<float> m(c);
  m.init(12);
  std::mt19937_64 rng(12);
  auto in = random_input(rng, c, 12);
  const auto logits = m.forward(in.seq());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const double mx = logits.row(t).maxCoeff();
    double z = 0.0;
    for (Eigen::Index v = 0; v < logits.cols(); ++v) z += std::exp(logits(t, v) - mx);
    double sum = 0.0;
    for (Eigen::Index v = 0; v < logits.cols(); ++v) sum += std::exp(logits(t, v) - mx) / z;
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("uniform and perfect logits give ln V and zero loss") {
  const int V = 9;
  RowMatrix<double> uniform = RowMatrix<double>::Zero(5, V);
  const std::vector<std::int32_t> targets{1, 2, 3, 4, 5};
  const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0};
  CHECK(masked_loss(uniform, targets, mask) == doctest::Approx(std::log(double(V))).epsilon(1e-12));
  RowMatrix<double> perfect = RowMatrix<double>::Zero(5, V);
  for (int r = 0; r < 5; ++r) perfect(r, targets[static_cast<std::size_t>(r)]) = 100.0;
  CHECK(masked_loss(perfect, targets, mask) < 1e-40);
}

TEST_CASE("relabeling two unused ids permutes the logits") {
  auto c = tiny();
  Transformer<double> m(c);
  m.init(13);
  Input in{{0, 3, 1, 4, 2, 0}, {0, 0, 1, 1, 2, 3}};
  const std::size_t a = 9, b = 11;  // absent from the input
  Transformer<double> swapped(c);
  swapped.params() = m.params();
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t wte = m.layout().wte;
  std::swap_ranges(swapped.params().begin() + static_cast<std::ptrdiff_t>(wte + a * d),
                   swapped.params().begin() + static_cast<std::ptrdiff_t>(wte + (a + 1) * d),
                   swapped.params().begin() + static_cast<std::ptrdiff_t>(wte + b * d));
  const auto x = m.forward(in.seq());
  const auto y = swapped.forward(in.seq());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    for (Eigen::Index v = 0; v < x.cols(); ++v) {
      const Eigen::Index u = v == Eigen::Index(a) ? Eigen::Index(b) : v == Eigen::Index(b) ? Eigen::Index(a) : v;
      CHECK(y(t, u) == doctest::Approx(x(t, v)).epsilon(1e-12));
    }
  }
}
