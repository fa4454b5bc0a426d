#pragma once

// Dense feed-forward trunk with two linear heads (one per task), manual
// backpropagation and SGD-with-momentum training.
//
// Parameter layout: one block per layer, in order trunk 1..L, head A,
// head B. A block stores its weight matrix row-major (out x in) followed
// by the bias vector. The task-t network is the trunk plus head t.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sharedepth/error.hpp"
#include "sharedepth/random.hpp"

namespace sharedepth {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Activation { relu, tanh, linear };
enum class Task { A = 0, B = 1 };

inline int index(Task t) { return static_cast<int>(t); }
inline Task other(Task t) { return t == Task::A ? Task::B : Task::A; }
inline const char* to_string(Task t) { return t == Task::A ? "A" : "B"; }

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::linear: return "linear";
  }
  return "?";
}

inline Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "linear") return Activation::linear;
  throw ConfigError("unknown activation '" + name + "'");
}

struct ModelSpec {
  int input_dim = 1;
  std::vector<int> trunk_widths;
  Activation activation = Activation::relu;
  std::array<int, 2> head_dims{1, 1};

  int depth() const { return static_cast<int>(trunk_widths.size()); }
  int head_dim(Task t) const { return head_dims[index(t)]; }
  int block_count() const { return depth() + 2; }
  int head_block(Task t) const { return depth() + index(t); }

  void validate() const {
    if (input_dim < 1) throw StructuralError("input_dim must be >= 1");
    if (trunk_widths.empty()) throw StructuralError("trunk depth must be >= 1");
    for (int w : trunk_widths)
      if (w < 1) throw StructuralError("trunk widths must be >= 1");
    if (head_dims[0] < 1 || head_dims[1] < 1) throw StructuralError("head dims must be >= 1");
  }

  int block_in(int b) const { return b == 0 ? input_dim : trunk_widths[std::min(b, depth()) - 1]; }
  int block_out(int b) const { return b < depth() ? trunk_widths[b] : head_dims[b - depth()]; }

  std::size_t block_size(int b) const {
    return static_cast<std::size_t>(block_out(b)) * (block_in(b) + 1);
  }

  /// Parameters of trunk layers 1..C (the shared encoder at depth C).
  std::size_t encoder_param_count(int C) const {
    std::size_t n = 0;
    for (int b = 0; b < C; ++b) n += block_size(b);
    return n;
  }

  /// Parameters of trunk layers C+1..L plus head t.
  std::size_t decoder_param_count(int C, Task t) const {
    std::size_t n = block_size(head_block(t));
    for (int b = C; b < depth(); ++b) n += block_size(b);
    return n;
  }

  std::size_t task_param_count(Task t) const { return encoder_param_count(depth()) + block_size(head_block(t)); }

  std::size_t total_param_count() const {
    std::size_t n = 0;
    for (int b = 0; b < block_count(); ++b) n += block_size(b);
    return n;
  }

  bool operator==(const ModelSpec&) const = default;
};

struct Block {
  std::size_t offset = 0;
  std::size_t length = 0;
  bool operator==(const Block&) const = default;
};

class ParamVector {
 public:
  ParamVector() = default;

  explicit ParamVector(const ModelSpec& spec) {
    spec.validate();
    std::size_t offset = 0;
    for (int b = 0; b < spec.block_count(); ++b) {
      blocks_.push_back({offset, spec.block_size(b)});
      offset += spec.block_size(b);
    }
    values_.assign(offset, 0.0);
  }

  std::size_t size() const { return values_.size(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  std::span<double> block(int b) { return {values_.data() + blocks_[b].offset, blocks_[b].length}; }
  std::span<const double> block(int b) const {
    return {values_.data() + blocks_[b].offset, blocks_[b].length};
  }

  /// Concatenation of the blocks for trunk layers 1..C.
  std::span<const double> encoder_slice(int C) const {
    const std::size_t end = C == 0 ? 0 : blocks_[C - 1].offset + blocks_[C - 1].length;
    return {values_.data(), end};
  }

  bool same_layout(const ParamVector& other) const { return blocks_ == other.blocks_; }

  bool operator==(const ParamVector&) const = default;

 private:
  std::vector<double> values_;
  std::vector<Block> blocks_;
};

namespace detail {

using ConstMatrixMap = Eigen::Map<const Matrix>;
using ConstVectorMap = Eigen::Map<const Vector>;

inline ConstMatrixMap weights(const ParamVector& p, const ModelSpec& spec, int b) {
  return {p.block(b).data(), spec.block_out(b), spec.block_in(b)};
}

inline ConstVectorMap bias(const ParamVector& p, const ModelSpec& spec, int b) {
  const auto blk = p.block(b);
  return {blk.data() + static_cast<std::size_t>(spec.block_out(b)) * spec.block_in(b), spec.block_out(b)};
}

inline void check_layout(const ParamVector& p, const ModelSpec& spec) {
  if (p.size() != spec.total_param_count() || p.blocks().size() != static_cast<std::size_t>(spec.block_count()))
    throw StructuralError("parameter vector does not match model spec");
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

/// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero. Each
/// trunk layer draws from its own stream; both heads draw from the same
/// stream, so heads of equal shape start identical.
inline ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  ParamVector p(spec);
  for (int b = 0; b < spec.block_count(); ++b) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(std::min(b, spec.depth()))));
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec.block_in(b)));
    auto blk = p.block(b);
    const std::size_t n_weights = static_cast<std::size_t>(spec.block_out(b)) * spec.block_in(b);
    for (std::size_t i = 0; i < n_weights; ++i) blk[i] = uniform(rng, -scale, scale);
  }
  return p;
}

struct Batch {
  Matrix features;
  Matrix z_a;  // n x |A|
  Matrix z_b;  // n x |B|
  std::vector<double> sample_weights;  // empty means all ones

  Eigen::Index rows() const { return features.rows(); }
  const Matrix& labels(Task t) const { return t == Task::A ? z_a : z_b; }

  Batch subset(std::span<const std::size_t> idx) const {
    Batch out;
    out.features.resize(static_cast<Eigen::Index>(idx.size()), features.cols());
    const bool has_a = z_a.rows() > 0, has_b = z_b.rows() > 0;
    if (has_a) out.z_a.resize(out.features.rows(), z_a.cols());
    if (has_b) out.z_b.resize(out.features.rows(), z_b.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto i = static_cast<Eigen::Index>(idx[r]);
      const auto ri = static_cast<Eigen::Index>(r);
      out.features.row(ri) = features.row(i);
      if (has_a) out.z_a.row(ri) = z_a.row(i);
      if (has_b) out.z_b.row(ri) = z_b.row(i);
      if (!sample_weights.empty()) out.sample_weights.push_back(sample_weights[idx[r]]);
    }
    return out;
  }
};

/// Per-class additive logit offsets for each task (empty means zeros).
struct LogitOffsets {
  std::vector<double> a;
  std::vector<double> b;
  const std::vector<double>& of(Task t) const { return t == Task::A ? a : b; }
};

struct TaskWeights {
  double a = 1.0;
  double b = 0.0;
  double of(Task t) const { return t == Task::A ? a : b; }
};

/// Activations of one forward pass, kept for backpropagation.
struct Tape {
  std::vector<Matrix> acts;  // acts[0] = input, acts[l] = output of trunk layer l
  std::vector<Matrix> deriv;  // activation derivative at each trunk layer
  const Matrix& representation() const { return acts.back(); }
};

inline Tape forward_trunk(const ParamVector& params, const ModelSpec& spec, const Matrix& features, int upto = -1) {
  detail::check_layout(params, spec);
  if (features.cols() != spec.input_dim) throw StructuralError("feature dimension does not match model input_dim");
  const int L = upto < 0 ? spec.depth() : upto;
  Tape tape;
  tape.acts.reserve(L + 1);
  tape.acts.push_back(features);
  for (int l = 0; l < L; ++l) {
    Matrix pre = tape.acts.back() * detail::weights(params, spec, l).transpose();
    pre.rowwise() += detail::bias(params, spec, l).transpose();
    Matrix d(pre.rows(), pre.cols());
    switch (spec.activation) {
      case Activation::relu:
        d = (pre.array() > 0.0).cast<double>();
        pre = pre.cwiseMax(0.0);
        break;
      case Activation::tanh:
        pre = pre.array().tanh();
        d = 1.0 - pre.array().square();
        break;
      case Activation::linear:
        d.setOnes();
        break;
    }
    tape.deriv.push_back(std::move(d));
    tape.acts.push_back(std::move(pre));
  }
  return tape;
}

inline Matrix head_logits(const ParamVector& params, const ModelSpec& spec, const Matrix& representation, Task t) {
  const int b = spec.head_block(t);
  Matrix s = representation * detail::weights(params, spec, b).transpose();
  s.rowwise() += detail::bias(params, spec, b).transpose();
  return s;
}

/// Raw per-class Bernoulli logits of the requested branch (n x |t|).
inline Matrix forward(const ParamVector& params, const ModelSpec& spec, const Matrix& features, Task branch) {
  const Tape tape = forward_trunk(params, spec, features);
  return head_logits(params, spec, tape.representation(), branch);
}

namespace detail {

// Per-entry BCE with offsets: softplus(s+o) - z(s+o). Returns the row-sum
// per sample and writes sigma(s+o) - z into residual.
inline Vector bce_rows(const Matrix& logits, const Matrix& z, const std::vector<double>& offsets, Matrix& residual) {
  if (z.rows() != logits.rows() || z.cols() != logits.cols())
    throw StructuralError("label matrix shape does not match logits");
  if (!offsets.empty() && static_cast<Eigen::Index>(offsets.size()) != logits.cols())
    throw StructuralError("logit offset count does not match head dimension");
  residual.resize(logits.rows(), logits.cols());
  Vector rows = Vector::Zero(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double acc = 0.0;
    for (Eigen::Index k = 0; k < logits.cols(); ++k) {
      const double x = logits(i, k) + (offsets.empty() ? 0.0 : offsets[k]);
      acc += softplus(x) - z(i, k) * x;
      residual(i, k) = sigmoid(x) - z(i, k);
    }
    rows[i] = acc;
  }
  return rows;
}

// Backpropagates per-sample head residuals into the parameter layout. With
// squared=true every per-sample gradient is squared before summation.
inline void backprop(const ParamVector& params, const ModelSpec& spec, const Tape& tape,
                     const std::array<const Matrix*, 2>& head_delta, bool squared, ParamVector& out) {
  const Matrix& rep = tape.representation();
  const Matrix rep_sq = squared ? Matrix(rep.array().square()) : Matrix();
  Matrix d_act = Matrix::Zero(rep.rows(), rep.cols());
  for (Task t : {Task::A, Task::B}) {
    const Matrix* delta = head_delta[index(t)];
    if (delta == nullptr) continue;
    const int b = spec.head_block(t);
    auto blk = out.block(b);
    Eigen::Map<Matrix> gw(blk.data(), spec.block_out(b), spec.block_in(b));
    Eigen::Map<Vector> gb(blk.data() + gw.size(), spec.block_out(b));
    if (squared) {
      const Matrix dsq = delta->array().square();
      gw += dsq.transpose() * rep_sq;
      gb += dsq.colwise().sum().transpose();
    } else {
      gw += delta->transpose() * rep;
      gb += delta->colwise().sum().transpose();
    }
    d_act += *delta * weights(params, spec, b);
  }
  for (int l = spec.depth() - 1; l >= 0; --l) {
    const Matrix d_pre = d_act.cwiseProduct(tape.deriv[l]);
    auto blk = out.block(l);
    Eigen::Map<Matrix> gw(blk.data(), spec.block_out(l), spec.block_in(l));
    Eigen::Map<Vector> gb(blk.data() + gw.size(), spec.block_out(l));
    if (squared) {
      const Matrix dsq = d_pre.array().square();
      gw += dsq.transpose() * Matrix(tape.acts[l].array().square());
      gb += dsq.colwise().sum().transpose();
    } else {
      gw += d_pre.transpose() * tape.acts[l];
      gb += d_pre.colwise().sum().transpose();
    }
    if (l > 0) d_act = d_pre * weights(params, spec, l);
  }
}

}  // namespace detail

struct LossGrad {
  double loss = 0.0;    // weighted objective
  double loss_a = 0.0;  // unweighted task-A BCE (0 when its weight is 0)
  double loss_b = 0.0;
  ParamVector grad;
};

/// Weighted objective w_A * BCE_A + w_B * BCE_B and its exact gradient.
/// BCE_t = -(1/n) sum_i s_i sum_k [z log sig(x) + (1-z) log(1-sig(x))],
/// x = logit + offset, s_i the sample weight. A task with zero weight is
/// neither evaluated nor read.
inline LossGrad objective_grad(const ParamVector& params, const ModelSpec& spec, const Batch& batch,
                               TaskWeights w, const LogitOffsets& offsets = {}) {
  const auto n = batch.rows();
  if (n == 0) throw DomainError("empty batch");
  const Tape tape = forward_trunk(params, spec, batch.features);
  LossGrad out;
  out.grad = ParamVector(spec);
  std::array<Matrix, 2> deltas;
  std::array<const Matrix*, 2> delta_ptr{nullptr, nullptr};
  for (Task t : {Task::A, Task::B}) {
    const double wt = w.of(t);
    if (wt == 0.0) continue;
    const Matrix& z = batch.labels(t);
    if (z.rows() != n) throw StructuralError(std::string("batch has no labels for task ") + to_string(t));
    const Matrix logits = head_logits(params, spec, tape.representation(), t);
    Matrix residual;
    Vector rows = detail::bce_rows(logits, z, offsets.of(t), residual);
    if (!batch.sample_weights.empty()) {
      const Eigen::Map<const Vector> sw(batch.sample_weights.data(), n);
      rows = rows.cwiseProduct(sw);
      residual = residual.array().colwise() * sw.array();
    }
    const double task_loss = rows.sum() / static_cast<double>(n);
    if (!std::isfinite(task_loss)) throw NumericError("non-finite BCE loss");
    (t == Task::A ? out.loss_a : out.loss_b) = task_loss;
    out.loss += wt * task_loss;
    deltas[index(t)] = residual * (wt / static_cast<double>(n));
    delta_ptr[index(t)] = &deltas[index(t)];
  }
  detail::backprop(params, spec, tape, delta_ptr, false, out.grad);
  return out;
}

/// Single-task BCE and gradient.
inline LossGrad bce_loss_grad(const ParamVector& params, const ModelSpec& spec, const Batch& batch, Task task,
                              const std::vector<double>& logit_offsets = {}) {
  LogitOffsets off;
  (task == Task::A ? off.a : off.b) = logit_offsets;
  return objective_grad(params, spec, batch, task == Task::A ? TaskWeights{1.0, 0.0} : TaskWeights{0.0, 1.0}, off);
}

struct OptimizerSettings {
  double learning_rate = 0.05;
  double momentum = 0.9;
  int epochs = 50;
  int batch_size = 64;  // <= 0 means full batch
  std::uint64_t seed = 0;
};

/// Block predicate: true for blocks the optimizer may update.
using BlockMask = std::function<bool(int block)>;

inline BlockMask all_blocks() {
  return [](int) { return true; };
}

struct TrainResult {
  ParamVector params;
  std::vector<double> epoch_loss;  // sample-weighted mean objective per epoch
};

/// Minimizes w_A * BCE_A + w_B * BCE_B with mini-batch SGD + momentum.
/// Batch order is a seeded shuffle per epoch. Blocks rejected by the mask
/// are never written.
inline TrainResult train(ParamVector params, const ModelSpec& spec, const Batch& data, TaskWeights w,
                         const OptimizerSettings& opt, const BlockMask& trainable = all_blocks(),
                         const LogitOffsets& offsets = {}) {
  detail::check_layout(params, spec);
  if (w.a < 0.0 || w.b < 0.0) throw ConfigError("task weights must be nonnegative");
  if (opt.epochs < 0) throw ConfigError("epochs must be >= 0");
  const auto n = static_cast<std::size_t>(data.rows());
  if (n == 0) throw DomainError("empty training set");
  const std::size_t bs = opt.batch_size <= 0 ? n : std::min<std::size_t>(opt.batch_size, n);

  std::vector<char> mask(spec.block_count());
  for (int b = 0; b < spec.block_count(); ++b) mask[b] = trainable(b) ? 1 : 0;

  std::vector<double> velocity(params.size(), 0.0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(opt.seed);
  TrainResult result;
  const bool full_batch = bs == n;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    if (!full_batch) shuffle(order, rng);
    double epoch_sum = 0.0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t stop = std::min(n, start + bs);
      LossGrad lg;
      try {
        lg = full_batch ? objective_grad(params, spec, data, w, offsets)
                        : objective_grad(params, spec, data.subset(std::span(order).subspan(start, stop - start)), w,
                                         offsets);
      } catch (const NumericError& e) {
        throw TrainingError(e.what(), epoch);
      }
      if (!std::isfinite(lg.loss)) throw TrainingError("training loss became non-finite", epoch);
      epoch_sum += lg.loss * static_cast<double>(stop - start);
      for (int b = 0; b < spec.block_count(); ++b) {
        if (!mask[b]) continue;
        const Block blk = params.blocks()[b];
        for (std::size_t j = blk.offset; j < blk.offset + blk.length; ++j) {
          velocity[j] = opt.momentum * velocity[j] + lg.grad.values()[j];
          params.values()[j] -= opt.learning_rate * velocity[j];
        }
      }
    }
    const double mean = epoch_sum / static_cast<double>(n);
    if (!std::isfinite(mean)) throw TrainingError("training loss became non-finite", epoch);
    result.epoch_loss.push_back(mean);
  }
  for (double v : params.values())
    if (!std::isfinite(v)) throw TrainingError("parameters became non-finite", opt.epochs - 1);
  result.params = std::move(params);
  return result;
}

/// Per-sample squared score gradients of log P(z_t | y) summed over the
/// batch (not yet averaged). Used by the diagonal Fisher estimator.
inline ParamVector squared_score_sum(const ParamVector& params, const ModelSpec& spec, const Batch& batch, Task t,
                                     const std::vector<double>& offsets = {}) {
  const Tape tape = forward_trunk(params, spec, batch.features);
  const Matrix logits = head_logits(params, spec, tape.representation(), t);
  Matrix residual;
  detail::bce_rows(logits, batch.labels(t), offsets, residual);
  ParamVector out(spec);
  std::array<const Matrix*, 2> delta{nullptr, nullptr};
  delta[index(t)] = &residual;
  detail::backprop(params, spec, tape, delta, true, out);
  return out;
}

}  // namespace sharedepth
