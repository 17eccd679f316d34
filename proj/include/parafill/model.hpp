#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace parafill::model {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int block_size = 1024;
  int vocab_size = 8192;
  int n_segments = 7;
  double dropout = 0.1;

  int d_ff() const { return 4 * d_model; }
  /// Throws UsageError when the shape is inconsistent.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// A named slice of the flat parameter buffer.
struct TensorInfo {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 1;  // 1 for vectors
  bool decay = false;    // weight decay applies (matrices only)
  std::size_t size() const { return rows * cols; }
};

/// Offsets of every tensor in the flat buffer, in a fixed order.
class Layout {
 public:
  explicit Layout(const ModelConfig& c);

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  std::size_t total() const { return total_; }
  const TensorInfo& find(const std::string& name) const;

  struct Block {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  };
  std::size_t wte = 0, wpe = 0, wse = 0, lnf_g = 0, lnf_b = 0;
  std::vector<Block> blocks;

 private:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols, bool decay);
  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

/// Per-position input of the model.
struct Sequence {
  std::span<const std::int32_t> ids;
  std::span<const std::uint8_t> segments;
};

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Flat parameter or gradient storage. A fixed base alignment keeps Eigen's
/// vectorized loops on the same path for every allocation, so results are
/// bitwise reproducible across model instances.
template <class T>
using ParamVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Mean negative log-likelihood over rows with mask set, and its gradient
/// with respect to `logits` (rows with mask unset get exactly zero).
/// `targets[r]` is the expected id for row r. Throws DataError("empty loss
/// support") when no row is selected.
template <class T>
double masked_loss(const RowMatrix<T>& logits, std::span<const std::int32_t> targets,
                   std::span<const std::uint8_t> mask, RowMatrix<T>* grad = nullptr);

/// Pre-norm decoder-only transformer: summed token, position and segment
/// embeddings, causal multi-head attention, GELU MLP, and an output head tied
/// to the token embedding.
template <class T>
class Transformer {
 public:
  explicit Transformer(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const Layout& layout() const { return layout_; }
  ParamVector<T>& params() { return params_; }
  const ParamVector<T>& params() const { return params_; }

  /// N(0, 0.02) weights, residual output projections scaled by 1/sqrt(2L),
  /// unit LayerNorm gains, zero biases.
  void init(std::uint64_t seed);

  /// Next-token logits for every position (no dropout).
  RowMatrix<T> forward(const Sequence& seq) const;

  /// Training objective for one sequence: row t predicts ids[t + 1] and
  /// counts when loss_mask[t + 1] is set. Returns the summed NLL and the
  /// number of counted tokens, and accumulates the gradient of
  /// (summed NLL * grad_scale) into `grad` (same layout as params). Dropout
  /// is active when `rng` is non-null.
  struct LossSum {
    double nll = 0.0;
    std::size_t count = 0;
    double max_logit = 0.0;
  };
  LossSum loss_and_grad(const Sequence& seq, std::span<const std::uint8_t> loss_mask, ParamVector<T>* grad,
                        double grad_scale, std::mt19937_64* rng) const;

  /// Mean NLL over selected targets without gradient (no dropout).
  LossSum loss(const Sequence& seq, std::span<const std::uint8_t> loss_mask) const {
    return loss_and_grad(seq, loss_mask, nullptr, 0.0, nullptr);
  }

  /// Incremental decoding state with a key/value cache.
  class Session {
   public:
    /// Logits for the next token after everything fed so far.
    const std::vector<T>& logits() const { return logits_; }
    std::size_t length() const { return length_; }
    /// Feeds one token. Throws DataError when the block is full.
    void advance(std::int32_t id, std::uint8_t segment);

   private:
    friend class Transformer;
    explicit Session(const Transformer* model);
    void feed(const Sequence& seq);

    const Transformer* model_;
    std::vector<RowMatrix<T>> k_;  // per layer, block_size x d
    std::vector<RowMatrix<T>> v_;
    std::size_t length_ = 0;
    std::vector<T> logits_;
  };

  /// Session primed with `prefix` (at least one token).
  Session start(const Sequence& prefix) const;

  /// Row of the token embedding (used for pooled text embeddings).
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> token_embedding(std::int32_t id) const;

 private:
  void check(const Sequence& seq) const;

  ModelConfig config_;
  Layout layout_;
  ParamVector<T> params_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

/// Copies parameters across precisions (same config).
template <class To, class From>
void copy_params(const Transformer<From>& from, Transformer<To>& to) {
  to.params().assign(from.params().begin(), from.params().end());
}

}  // namespace parafill::model
