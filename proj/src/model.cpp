#include "parafill/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "parafill/types.hpp"

namespace parafill::model {

void ModelConfig::validate() const {
  if (n_layers < 0 || n_heads < 1 || d_model < 1 || block_size < 1 || vocab_size < 1 || n_segments < 1) {
    throw UsageError("model config: sizes must be positive");
  }
  if (d_model % n_heads != 0) throw UsageError("model config: d_model must be divisible by n_heads");
  if (dropout < 0.0 || dropout >= 1.0) throw UsageError("model config: dropout must be in [0, 1)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},     {"n_heads", c.n_heads},       {"d_model", c.d_model},
                     {"block_size", c.block_size}, {"vocab_size", c.vocab_size}, {"n_segments", c.n_segments},
                     {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_model = j.value("d_model", d.d_model);
  c.block_size = j.value("block_size", d.block_size);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.n_segments = j.value("n_segments", d.n_segments);
  c.dropout = j.value("dropout", d.dropout);
}

Layout::Layout(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto f = static_cast<std::size_t>(c.d_ff());
  wte = add("wte", static_cast<std::size_t>(c.vocab_size), d, true);
  wpe = add("wpe", static_cast<std::size_t>(c.block_size), d, true);
  wse = add("wse", static_cast<std::size_t>(c.n_segments), d, true);
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    Block b{};
    b.ln1_g = add(p + "ln1.g", d, 1, false);
    b.ln1_b = add(p + "ln1.b", d, 1, false);
    b.w_qkv = add(p + "attn.w_qkv", d, 3 * d, true);
    b.b_qkv = add(p + "attn.b_qkv", 3 * d, 1, false);
    b.w_o = add(p + "attn.w_o", d, d, true);
    b.b_o = add(p + "attn.b_o", d, 1, false);
    b.ln2_g = add(p + "ln2.g", d, 1, false);
    b.ln2_b = add(p + "ln2.b", d, 1, false);
    b.w_fc = add(p + "mlp.w_fc", d, f, true);
    b.b_fc = add(p + "mlp.b_fc", f, 1, false);
    b.w_proj = add(p + "mlp.w_proj", f, d, true);
    b.b_proj = add(p + "mlp.b_proj", d, 1, false);
    blocks.push_back(b);
  }
  lnf_g = add("lnf.g", d, 1, false);
  lnf_b = add("lnf.b", d, 1, false);
}

std::size_t Layout::add(std::string name, std::size_t rows, std::size_t cols, bool decay) {
  tensors_.push_back({std::move(name), total_, rows, cols, decay});
  total_ += rows * cols;
  return tensors_.back().offset;
}

const TensorInfo& Layout::find(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw DataError("unknown tensor " + name);
}

namespace {

template <class T>
using Mat = RowMatrix<T>;
template <class T>
using MapM = Eigen::Map<Mat<T>>;
template <class T>
using CMapM = Eigen::Map<const Mat<T>>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <class T>
using CMapRow = Eigen::Map<const RowVec<T>>;
template <class T>
using MapRow = Eigen::Map<RowVec<T>>;

constexpr double kLnEps = 1e-5;

template <class T>
void layernorm(const Mat<T>& x, const T* g, const T* b, Mat<T>& xhat, std::vector<T>& rstd, Mat<T>& y) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  xhat.resize(n, d);
  y.resize(n, d);
  rstd.resize(static_cast<std::size_t>(n));
  CMapRow<T> gv(g, d);
  CMapRow<T> bv(b, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T r = T(1) / std::sqrt(var + T(kLnEps));
    rstd[static_cast<std::size_t>(i)] = r;
    xhat.row(i) = (x.row(i).array() - mean) * r;
    y.row(i) = xhat.row(i).cwiseProduct(gv) + bv;
  }
}

// Returns dx; accumulates dg, db.
template <class T>
Mat<T> layernorm_backward(const Mat<T>& dy, const Mat<T>& xhat, const std::vector<T>& rstd, const T* g, T* dg, T* db) {
  const Eigen::Index n = dy.rows();
  const Eigen::Index d = dy.cols();
  CMapRow<T> gv(g, d);
  Mat<T> dx(n, d);
  if (dg != nullptr) {
    MapRow<T>(dg, d) += dy.cwiseProduct(xhat).colwise().sum();
    MapRow<T>(db, d) += dy.colwise().sum();
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    RowVec<T> dxhat = dy.row(i).cwiseProduct(gv);
    const T m1 = dxhat.mean();
    const T m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
    dx.row(i) = (dxhat.array() - m1 - xhat.row(i).array() * m2) * rstd[static_cast<std::size_t>(i)];
  }
  return dx;
}

template <class T>
T gelu(T x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2 / pi)
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  constexpr T c = T(0.7978845608028654);
  const T t = std::tanh(c * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * T(0.044715) * x * x);
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Inverted dropout mask: entries are 0 or 1/(1-p).
template <class T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, std::mt19937_64& rng) {
  Mat<T> m(rows, cols);
  const T keep = T(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform01(rng) < p ? T(0) : keep;
  return m;
}

// Causal softmax in place over the first `visible(i)` columns of each row.
template <class T>
void causal_softmax(Mat<T>& s, Eigen::Index offset) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const Eigen::Index visible = offset + i + 1;
    auto row = s.row(i);
    const T mx = row.head(visible).maxCoeff();
    T sum = 0;
    for (Eigen::Index j = 0; j < visible; ++j) {
      row(j) = std::exp(row(j) - mx);
      sum += row(j);
    }
    row.head(visible) /= sum;
    if (visible < s.cols()) row.tail(s.cols() - visible).setZero();
  }
}

template <class T>
struct LayerCache {
  Mat<T> x_in, xhat1, ln1, qkv, cat, x_mid, xhat2, ln2, fc_pre, fc_act;
  std::vector<T> rstd1, rstd2;
  std::vector<Mat<T>> probs;  // per head
  Mat<T> drop_attn, drop_mlp;
};

template <class T>
struct ForwardCache {
  std::vector<LayerCache<T>> layers;
  Mat<T> drop_emb;
  Mat<T> x_final, xhat_f, h;
  std::vector<T> rstd_f;
};

}  // namespace

template <class T>
double masked_loss(const RowMatrix<T>& logits, std::span<const std::int32_t> targets,
                   std::span<const std::uint8_t> mask, RowMatrix<T>* grad) {
  const auto rows = static_cast<std::size_t>(logits.rows());
  if (targets.size() != rows || mask.size() != rows) throw UsageError("masked_loss: shape mismatch");
  std::size_t count = 0;
  for (auto m : mask) count += m != 0 ? 1 : 0;
  if (count == 0) throw DataError("empty loss support");
  if (grad != nullptr) grad->setZero(logits.rows(), logits.cols());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (mask[r] == 0) continue;
    const auto row = logits.row(static_cast<Eigen::Index>(r));
    const double mx = static_cast<double>(row.maxCoeff());
    double sum = 0.0;
    for (Eigen::Index v = 0; v < row.size(); ++v) sum += std::exp(static_cast<double>(row(v)) - mx);
    const double lse = mx + std::log(sum);
    total += lse - static_cast<double>(row(targets[r]));
    if (grad != nullptr) {
      auto g = grad->row(static_cast<Eigen::Index>(r));
      for (Eigen::Index v = 0; v < row.size(); ++v) {
        g(v) = static_cast<T>(std::exp(static_cast<double>(row(v)) - lse) / static_cast<double>(count));
      }
      g(targets[r]) -= static_cast<T>(1.0 / static_cast<double>(count));
    }
  }
  return total / static_cast<double>(count);
}

template double masked_loss<float>(const RowMatrix<float>&, std::span<const std::int32_t>,
                                   std::span<const std::uint8_t>, RowMatrix<float>*);
template double masked_loss<double>(const RowMatrix<double>&, std::span<const std::int32_t>,
                                    std::span<const std::uint8_t>, RowMatrix<double>*);

template <class T>
Transformer<T>::Transformer(const ModelConfig& config) : config_(config), layout_(config) {
  config_.validate();
  params_.assign(layout_.total(), T(0));
}

template <class T>
void Transformer<T>::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double residual_std = 0.02 / std::sqrt(2.0 * std::max(1, config_.n_layers));
  for (const auto& t : layout_.tensors()) {
    T* p = params_.data() + t.offset;
    const bool gain = t.name.size() > 2 && t.name.compare(t.name.size() - 2, 2, ".g") == 0;
    const bool residual = t.name.find("attn.w_o") != std::string::npos || t.name.find("mlp.w_proj") != std::string::npos;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t.cols > 1) {
        p[i] = static_cast<T>(normal(rng) * (residual ? residual_std : 0.02));
      } else {
        p[i] = gain ? T(1) : T(0);
      }
    }
  }
}

template <class T>
void Transformer<T>::check(const Sequence& seq) const {
  if (seq.ids.size() != seq.segments.size()) throw UsageError("ids and segments differ in length");
  if (seq.ids.size() > static_cast<std::size_t>(config_.block_size)) throw DataError("sequence longer than block");
  for (auto id : seq.ids) {
    if (id < 0 || id >= config_.vocab_size) throw DataError("token id out of range: " + std::to_string(id));
  }
  for (auto s : seq.segments) {
    if (s >= config_.n_segments) throw DataError("segment id out of range: " + std::to_string(s));
  }
}

namespace {

template <class T>
Mat<T> embed(const ParamVector<T>& params, const Layout& lay, const ModelConfig& c, const Sequence& seq,
             std::size_t n, std::size_t pos0) {
  const Eigen::Index d = c.d_model;
  Mat<T> x(static_cast<Eigen::Index>(n), d);
  for (std::size_t t = 0; t < n; ++t) {
    x.row(static_cast<Eigen::Index>(t)) =
        CMapRow<T>(params.data() + lay.wte + static_cast<std::size_t>(seq.ids[t]) * d, d) +
        CMapRow<T>(params.data() + lay.wpe + (pos0 + t) * d, d) +
        CMapRow<T>(params.data() + lay.wse + static_cast<std::size_t>(seq.segments[t]) * d, d);
  }
  return x;
}

// Training/analysis forward over positions [0, n). Fills the cache and
// returns nothing; the final normalized hidden states are in cache.h.
template <class T>
void forward_full(const ParamVector<T>& P, const Layout& lay, const ModelConfig& c, const Sequence& seq,
                  std::size_t n, std::mt19937_64* rng, ForwardCache<T>& fc) {
  const Eigen::Index d = c.d_model;
  const Eigen::Index H = c.n_heads;
  const Eigen::Index dh = d / H;
  const Eigen::Index N = static_cast<Eigen::Index>(n);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const bool drop = rng != nullptr && c.dropout > 0.0;

  Mat<T> x = embed(P, lay, c, seq, n, 0);
  if (drop) {
    fc.drop_emb = dropout_mask<T>(N, d, c.dropout, *rng);
    x.array() *= fc.drop_emb.array();
  }
  fc.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& b = lay.blocks[static_cast<std::size_t>(l)];
    auto& L = fc.layers[static_cast<std::size_t>(l)];
    L.x_in = x;
    layernorm(x, P.data() + b.ln1_g, P.data() + b.ln1_b, L.xhat1, L.rstd1, L.ln1);
    L.qkv.noalias() = L.ln1 * CMapM<T>(P.data() + b.w_qkv, d, 3 * d);
    L.qkv.rowwise() += CMapRow<T>(P.data() + b.b_qkv, 3 * d);
    L.cat.resize(N, d);
    L.probs.resize(static_cast<std::size_t>(H));
    for (Eigen::Index h = 0; h < H; ++h) {
      auto q = L.qkv.block(0, h * dh, N, dh);
      auto k = L.qkv.block(0, d + h * dh, N, dh);
      auto v = L.qkv.block(0, 2 * d + h * dh, N, dh);
      Mat<T>& s = L.probs[static_cast<std::size_t>(h)];
      s.noalias() = (q * k.transpose()) * scale;
      causal_softmax(s, 0);
      L.cat.block(0, h * dh, N, dh).noalias() = s * v;
    }
    Mat<T> attn = L.cat * CMapM<T>(P.data() + b.w_o, d, d);
    attn.rowwise() += CMapRow<T>(P.data() + b.b_o, d);
    if (drop) {
      L.drop_attn = dropout_mask<T>(N, d, c.dropout, *rng);
      attn.array() *= L.drop_attn.array();
    }
    L.x_mid = x + attn;
    layernorm(L.x_mid, P.data() + b.ln2_g, P.data() + b.ln2_b, L.xhat2, L.rstd2, L.ln2);
    L.fc_pre.noalias() = L.ln2 * CMapM<T>(P.data() + b.w_fc, d, c.d_ff());
    L.fc_pre.rowwise() += CMapRow<T>(P.data() + b.b_fc, c.d_ff());
    L.fc_act = L.fc_pre.unaryExpr([](T v) { return gelu(v); });
    Mat<T> mlp = L.fc_act * CMapM<T>(P.data() + b.w_proj, c.d_ff(), d);
    mlp.rowwise() += CMapRow<T>(P.data() + b.b_proj, d);
    if (drop) {
      L.drop_mlp = dropout_mask<T>(N, d, c.dropout, *rng);
      mlp.array() *= L.drop_mlp.array();
    }
    x = L.x_mid + mlp;
  }
  fc.x_final = std::move(x);
  layernorm(fc.x_final, P.data() + lay.lnf_g, P.data() + lay.lnf_b, fc.xhat_f, fc.rstd_f, fc.h);
}

}  // namespace

template <class T>
RowMatrix<T> Transformer<T>::forward(const Sequence& seq) const {
  check(seq);
  if (seq.ids.empty()) return RowMatrix<T>(0, config_.vocab_size);
  ForwardCache<T> fc;
  forward_full(params_, layout_, config_, seq, seq.ids.size(), nullptr, fc);
  return fc.h * CMapM<T>(params_.data() + layout_.wte, config_.vocab_size, config_.d_model).transpose();
}

template <class T>
typename Transformer<T>::LossSum Transformer<T>::loss_and_grad(const Sequence& seq,
                                                               std::span<const std::uint8_t> loss_mask,
                                                               ParamVector<T>* grad, double grad_scale,
                                                               std::mt19937_64* rng) const {
  check(seq);
  if (loss_mask.size() < seq.ids.size()) throw UsageError("loss mask shorter than sequence");
  std::vector<Eigen::Index> rows;
  std::vector<std::int32_t> targets;
  for (std::size_t t = 0; t + 1 < seq.ids.size(); ++t) {
    if (loss_mask[t + 1] != 0) {
      rows.push_back(static_cast<Eigen::Index>(t));
      targets.push_back(seq.ids[t + 1]);
    }
  }
  if (rows.empty()) throw DataError("empty loss support");
  const std::size_t n = static_cast<std::size_t>(rows.back()) + 1;
  const Eigen::Index d = config_.d_model;
  const Eigen::Index V = config_.vocab_size;
  const Eigen::Index R = static_cast<Eigen::Index>(rows.size());
  const auto& P = params_;

  ForwardCache<T> fc;
  forward_full(P, layout_, config_, seq, n, rng, fc);

  Mat<T> hsel(R, d);
  for (Eigen::Index r = 0; r < R; ++r) hsel.row(r) = fc.h.row(rows[static_cast<std::size_t>(r)]);
  CMapM<T> wte(P.data() + layout_.wte, V, d);
  Mat<T> logits = hsel * wte.transpose();

  LossSum out;
  out.count = rows.size();
  out.max_logit = -std::numeric_limits<double>::infinity();
  for (Eigen::Index r = 0; r < R; ++r) {
    auto row = logits.row(r);
    const double mx = static_cast<double>(row.maxCoeff());
    out.max_logit = std::max(out.max_logit, mx);
    double sum = 0.0;
    for (Eigen::Index v = 0; v < V; ++v) sum += std::exp(static_cast<double>(row(v)) - mx);
    const double lse = mx + std::log(sum);
    out.nll += lse - static_cast<double>(row(targets[static_cast<std::size_t>(r)]));
    if (grad != nullptr) {
      // Reuse the logits buffer for d(loss)/d(logits).
      for (Eigen::Index v = 0; v < V; ++v) row(v) = static_cast<T>(std::exp(static_cast<double>(row(v)) - lse) * grad_scale);
      row(targets[static_cast<std::size_t>(r)]) -= static_cast<T>(grad_scale);
    }
  }
  if (grad == nullptr) return out;

  ParamVector<T>& G = *grad;
  if (G.size() != P.size()) G.assign(P.size(), T(0));
  const ModelConfig& c = config_;
  const Eigen::Index H = c.n_heads;
  const Eigen::Index dh = d / H;
  const Eigen::Index N = static_cast<Eigen::Index>(n);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  MapM<T>(G.data() + layout_.wte, V, d).noalias() += logits.transpose() * hsel;
  Mat<T> dh_sel = logits * wte;
  Mat<T> dhf = Mat<T>::Zero(N, d);
  for (Eigen::Index r = 0; r < R; ++r) dhf.row(rows[static_cast<std::size_t>(r)]) = dh_sel.row(r);
  Mat<T> dx = layernorm_backward(dhf, fc.xhat_f, fc.rstd_f, P.data() + layout_.lnf_g, G.data() + layout_.lnf_g,
                                 G.data() + layout_.lnf_b);

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& b = layout_.blocks[static_cast<std::size_t>(l)];
    auto& L = fc.layers[static_cast<std::size_t>(l)];
    // MLP branch.
    Mat<T> dmlp = dx;
    if (L.drop_mlp.size() > 0) dmlp.array() *= L.drop_mlp.array();
    MapRow<T>(G.data() + b.b_proj, d) += dmlp.colwise().sum();
    MapM<T>(G.data() + b.w_proj, c.d_ff(), d).noalias() += L.fc_act.transpose() * dmlp;
    Mat<T> dpre = dmlp * CMapM<T>(P.data() + b.w_proj, c.d_ff(), d).transpose();
    dpre.array() *= L.fc_pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
    MapRow<T>(G.data() + b.b_fc, c.d_ff()) += dpre.colwise().sum();
    MapM<T>(G.data() + b.w_fc, d, c.d_ff()).noalias() += L.ln2.transpose() * dpre;
    Mat<T> dln2 = dpre * CMapM<T>(P.data() + b.w_fc, d, c.d_ff()).transpose();
    dx += layernorm_backward(dln2, L.xhat2, L.rstd2, P.data() + b.ln2_g, G.data() + b.ln2_g, G.data() + b.ln2_b);

    // Attention branch.
    Mat<T> dattn = dx;
    if (L.drop_attn.size() > 0) dattn.array() *= L.drop_attn.array();
    MapRow<T>(G.data() + b.b_o, d) += dattn.colwise().sum();
    MapM<T>(G.data() + b.w_o, d, d).noalias() += L.cat.transpose() * dattn;
    Mat<T> dcat = dattn * CMapM<T>(P.data() + b.w_o, d, d).transpose();
    Mat<T> dqkv(N, 3 * d);
    for (Eigen::Index h = 0; h < H; ++h) {
      auto q = L.qkv.block(0, h * dh, N, dh);
      auto k = L.qkv.block(0, d + h * dh, N, dh);
      auto v = L.qkv.block(0, 2 * d + h * dh, N, dh);
      const Mat<T>& p = L.probs[static_cast<std::size_t>(h)];
      auto dout = dcat.block(0, h * dh, N, dh);
      Mat<T> dp = dout * v.transpose();
      dqkv.block(0, 2 * d + h * dh, N, dh).noalias() = p.transpose() * dout;
      // dS = P * (dP - rowsum(dP * P)); entries above the diagonal stay 0.
      Eigen::Matrix<T, Eigen::Dynamic, 1> rs = dp.cwiseProduct(p).rowwise().sum();
      Mat<T> ds = p.cwiseProduct(dp - rs.replicate(1, N));
      dqkv.block(0, h * dh, N, dh).noalias() = (ds * k) * scale;
      dqkv.block(0, d + h * dh, N, dh).noalias() = (ds.transpose() * q) * scale;
    }
    MapRow<T>(G.data() + b.b_qkv, 3 * d) += dqkv.colwise().sum();
    MapM<T>(G.data() + b.w_qkv, d, 3 * d).noalias() += L.ln1.transpose() * dqkv;
    Mat<T> dln1 = dqkv * CMapM<T>(P.data() + b.w_qkv, d, 3 * d).transpose();
    dx += layernorm_backward(dln1, L.xhat1, L.rstd1, P.data() + b.ln1_g, G.data() + b.ln1_g, G.data() + b.ln1_b);
  }

  if (fc.drop_emb.size() > 0) dx.array() *= fc.drop_emb.array();
  for (Eigen::Index t = 0; t < N; ++t) {
    const auto ut = static_cast<std::size_t>(t);
    MapRow<T>(G.data() + layout_.wte + static_cast<std::size_t>(seq.ids[ut]) * d, d) += dx.row(t);
    MapRow<T>(G.data() + layout_.wpe + ut * d, d) += dx.row(t);
    MapRow<T>(G.data() + layout_.wse + static_cast<std::size_t>(seq.segments[ut]) * d, d) += dx.row(t);
  }
  return out;
}

template <class T>
Transformer<T>::Session::Session(const Transformer* model) : model_(model) {
  const auto& c = model->config();
  for (int l = 0; l < c.n_layers; ++l) {
    k_.emplace_back(c.block_size, c.d_model);
    v_.emplace_back(c.block_size, c.d_model);
  }
}

template <class T>
void Transformer<T>::Session::feed(const Sequence& seq) {
  const auto& c = model_->config();
  const auto& P = model_->params();
  const auto& lay = model_->layout();
  const std::size_t m = seq.ids.size();
  if (m == 0) return;
  if (length_ + m > static_cast<std::size_t>(c.block_size)) throw DataError("block is full");
  const Eigen::Index d = c.d_model;
  const Eigen::Index H = c.n_heads;
  const Eigen::Index dh = d / H;
  const Eigen::Index M = static_cast<Eigen::Index>(m);
  const Eigen::Index L0 = static_cast<Eigen::Index>(length_);
  const Eigen::Index total = L0 + M;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Mat<T> x = embed(P, lay, c, seq, m, length_);
  Mat<T> xhat;
  Mat<T> y;
  std::vector<T> rstd;
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& b = lay.blocks[static_cast<std::size_t>(l)];
    auto& K = k_[static_cast<std::size_t>(l)];
    auto& Vc = v_[static_cast<std::size_t>(l)];
    layernorm(x, P.data() + b.ln1_g, P.data() + b.ln1_b, xhat, rstd, y);
    Mat<T> qkv = y * CMapM<T>(P.data() + b.w_qkv, d, 3 * d);
    qkv.rowwise() += CMapRow<T>(P.data() + b.b_qkv, 3 * d);
    K.block(L0, 0, M, d) = qkv.block(0, d, M, d);
    Vc.block(L0, 0, M, d) = qkv.block(0, 2 * d, M, d);
    Mat<T> cat(M, d);
    for (Eigen::Index h = 0; h < H; ++h) {
      Mat<T> s = (qkv.block(0, h * dh, M, dh) * K.block(0, h * dh, total, dh).transpose()) * scale;
      causal_softmax(s, L0);
      cat.block(0, h * dh, M, dh).noalias() = s * Vc.block(0, h * dh, total, dh);
    }
    Mat<T> attn = cat * CMapM<T>(P.data() + b.w_o, d, d);
    attn.rowwise() += CMapRow<T>(P.data() + b.b_o, d);
    x += attn;
    layernorm(x, P.data() + b.ln2_g, P.data() + b.ln2_b, xhat, rstd, y);
    Mat<T> pre = y * CMapM<T>(P.data() + b.w_fc, d, c.d_ff());
    pre.rowwise() += CMapRow<T>(P.data() + b.b_fc, c.d_ff());
    Mat<T> act = pre.unaryExpr([](T v) { return gelu(v); });
    Mat<T> mlp = act * CMapM<T>(P.data() + b.w_proj, c.d_ff(), d);
    mlp.rowwise() += CMapRow<T>(P.data() + b.b_proj, d);
    x += mlp;
  }
  Mat<T> last = x.row(M - 1);
  layernorm(last, P.data() + lay.lnf_g, P.data() + lay.lnf_b, xhat, rstd, y);
  logits_.resize(static_cast<std::size_t>(c.vocab_size));
  MapRow<T>(logits_.data(), c.vocab_size).noalias() = y * CMapM<T>(P.data() + lay.wte, c.vocab_size, d).transpose();
  length_ += m;
}

template <class T>
void Transformer<T>::Session::advance(std::int32_t id, std::uint8_t segment) {
  Sequence s{std::span<const std::int32_t>(&id, 1), std::span<const std::uint8_t>(&segment, 1)};
  model_->check(s);
  feed(s);
}

template <class T>
typename Transformer<T>::Session Transformer<T>::start(const Sequence& prefix) const {
  check(prefix);
  if (prefix.ids.empty()) throw UsageError("empty prefix");
  Session s(this);
  s.feed(prefix);
  return s;
}

template <class T>
Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> Transformer<T>::token_embedding(std::int32_t id) const {
  if (id < 0 || id >= config_.vocab_size) throw DataError("token id out of range: " + std::to_string(id));
  return Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(
      params_.data() + layout_.wte + static_cast<std::size_t>(id) * static_cast<std::size_t>(config_.d_model),
      config_.d_model);
}

template class Transformer<float>;
template class Transformer<double>;

}  // namespace parafill::model
