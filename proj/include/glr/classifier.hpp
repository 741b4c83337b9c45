#ifndef GLR_CLASSIFIER_HPP
#define GLR_CLASSIFIER_HPP

// Fully connected classification head (student/teacher), the mixed
// cross-entropy / KL-distillation objective with hand-written backprop,
// and SGD/Adam updates. Everything is double precision.

#include "glr/core.hpp"
#include "glr/latent_store.hpp"

#include <json.hpp>

#include <optional>

namespace glr {

/// Hidden widths of the trainable head.
inline const std::vector<int> kDefaultHiddenDims = {512, 256, 128, 64, 32};

enum class Activation { relu };

struct DenseLayer {
  Matrix weight;  // fan_in x fan_out
  RowVector bias;  // fan_out
};

/// Gradients share the parameter layout of the model.
using Gradients = std::vector<DenseLayer>;

struct MlpClassifier {
  std::vector<int> layer_dims;  // input, hidden..., classes
  std::vector<DenseLayer> layers;
  Activation activation = Activation::relu;

  int input_dim() const { return layer_dims.front(); }
  int class_count() const { return layer_dims.back(); }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Parameters layer by layer: weight (row-major), then bias.
  Vector flatten() const {
    Vector out(parameter_count());
    Index k = 0;
    for (const auto& l : layers) {
      for (Index i = 0; i < l.weight.rows(); ++i)
        for (Index j = 0; j < l.weight.cols(); ++j) out(k++) = l.weight(i, j);
      for (Index j = 0; j < l.bias.size(); ++j) out(k++) = l.bias(j);
    }
    return out;
  }

  void assign(const Vector& flat) {
    if (flat.size() != parameter_count()) throw Error("MlpClassifier::assign: parameter count mismatch");
    Index k = 0;
    for (auto& l : layers) {
      for (Index i = 0; i < l.weight.rows(); ++i)
        for (Index j = 0; j < l.weight.cols(); ++j) l.weight(i, j) = flat(k++);
      for (Index j = 0; j < l.bias.size(); ++j) l.bias(j) = flat(k++);
    }
  }

  bool operator==(const MlpClassifier& o) const {
    if (layer_dims != o.layer_dims || activation != o.activation) return false;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].weight != o.layers[i].weight || layers[i].bias != o.layers[i].bias) return false;
    return true;
  }
};

inline Vector flatten(const Gradients& g) {
  Index n = 0;
  for (const auto& l : g) n += l.weight.size() + l.bias.size();
  Vector out(n);
  Index k = 0;
  for (const auto& l : g) {
    for (Index i = 0; i < l.weight.rows(); ++i)
      for (Index j = 0; j < l.weight.cols(); ++j) out(k++) = l.weight(i, j);
    for (Index j = 0; j < l.bias.size(); ++j) out(k++) = l.bias(j);
  }
  return out;
}

/// He-uniform weights, zero biases.
inline MlpClassifier mlp_init(int input_dim, int class_count, std::uint64_t seed,
                              const std::vector<int>& hidden = kDefaultHiddenDims) {
  if (input_dim < 1) throw Error("mlp_init: input_dim must be >= 1");
  if (class_count < 2) throw Error("mlp_init: class_count must be >= 2");
  for (int h : hidden)
    if (h < 1) throw Error("mlp_init: hidden widths must be >= 1");
  MlpClassifier m;
  m.layer_dims.push_back(input_dim);
  m.layer_dims.insert(m.layer_dims.end(), hidden.begin(), hidden.end());
  m.layer_dims.push_back(class_count);
  Rng rng = make_rng(seed, {0x6d6c70ULL});
  for (std::size_t l = 0; l + 1 < m.layer_dims.size(); ++l) {
    const int fan_in = m.layer_dims[l];
    const int fan_out = m.layer_dims[l + 1];
    const double limit = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> u(-limit, limit);
    DenseLayer layer{Matrix(fan_in, fan_out), RowVector::Zero(fan_out)};
    for (Index i = 0; i < fan_in; ++i)
      for (Index j = 0; j < fan_out; ++j) layer.weight(i, j) = u(rng);
    m.layers.push_back(std::move(layer));
  }
  return m;
}

namespace detail {

/// Forward pass keeping every layer input; the last entry is the logits.
/// Existing storage in `acts` is reused when the shapes match.
inline void forward_trace(const MlpClassifier& model, const Matrix& batch, std::vector<Matrix>& acts) {
  if (batch.cols() != model.input_dim())
    throw Error("forward: batch dim " + std::to_string(batch.cols()) + " does not match model input " +
                std::to_string(model.input_dim()));
  acts.resize(model.layers.size() + 1);
  acts[0] = batch;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    Matrix& z = acts[l + 1];
    z.noalias() = acts[l] * model.layers[l].weight;
    z.rowwise() += model.layers[l].bias;
    if (l + 1 < model.layers.size()) z = z.cwiseMax(0.0);
  }
}

inline std::vector<Matrix> forward_trace(const MlpClassifier& model, const Matrix& batch) {
  std::vector<Matrix> acts;
  forward_trace(model, batch, acts);
  return acts;
}

}  // namespace detail

/// Scratch buffers for repeated forward/backward passes. Keeping one alive
/// across mini-batches avoids reallocating every layer-sized matrix per step.
struct Workspace {
  std::vector<Matrix> acts;
  std::vector<Matrix> deltas;  // loss gradient w.r.t. each layer's output
  Gradients grads;
};

inline Matrix forward(const MlpClassifier& model, const Matrix& batch) {
  return std::move(detail::forward_trace(model, batch).back());
}

/// Logits computed in `ws`; the reference is valid until ws is reused.
inline const Matrix& forward(const MlpClassifier& model, const Matrix& batch, Workspace& ws) {
  detail::forward_trace(model, batch, ws.acts);
  return ws.acts.back();
}

inline Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double lse = log_sum_exp(logits.row(i).transpose());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

inline Matrix softmax_rows(const Matrix& logits) { return log_softmax_rows(logits).array().exp().matrix(); }

/// Which way the distillation KL points.
enum class KlDirection {
  teacher_student,  // KL(softmax(teacher) || softmax(student))
  student_teacher,  // KL(softmax(student) || softmax(teacher))
};

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double kld = 0.0;
  double alpha = 0.0;
};

struct LossAndGrad {
  LossBreakdown loss;
  Gradients grads;
};

/// total = (1 - alpha) * mean CE + alpha * mean KL between teacher and
/// student output distributions. The KL term is reported as 0 when no teacher
/// logits are given (only allowed with alpha = 0). Gradients land in ws.grads.
inline LossBreakdown loss_and_grad(const MlpClassifier& model, const Matrix& batch, const std::vector<int>& labels,
                                   const Matrix* teacher_logits, double alpha, KlDirection direction, Workspace& ws) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("loss_and_grad: alpha must lie in [0, 1]");
  if (alpha > 0.0 && teacher_logits == nullptr) throw Error("loss_and_grad: alpha > 0 requires teacher logits");
  const Index n = batch.rows();
  if (n == 0) throw Error("loss_and_grad: empty batch");
  if (static_cast<Index>(labels.size()) != n) throw Error("loss_and_grad: label count mismatch");
  const int classes = model.class_count();
  for (int y : labels)
    if (y < 0 || y >= classes) throw Error("loss_and_grad: label " + std::to_string(y) + " out of range");
  if (teacher_logits && (teacher_logits->rows() != n || teacher_logits->cols() != classes))
    throw Error("loss_and_grad: teacher logits shape mismatch");

  detail::forward_trace(model, batch, ws.acts);
  const auto& acts = ws.acts;
  const Matrix& logits = acts.back();
  const Matrix log_p = log_softmax_rows(logits);
  const Matrix p = log_p.array().exp().matrix();
  const double inv_n = 1.0 / static_cast<double>(n);

  // d(mean CE)/dlogits = (p - onehot) / n
  double ce = 0.0;
  Matrix d_ce = p;
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    ce -= log_p(i, y);
    d_ce(i, y) -= 1.0;
  }
  ce *= inv_n;
  d_ce *= inv_n;

  double kld = 0.0;
  Matrix d_kl = Matrix::Zero(n, classes);
  if (teacher_logits) {
    const Matrix log_q = log_softmax_rows(*teacher_logits);
    const Matrix q = log_q.array().exp().matrix();
    for (Index i = 0; i < n; ++i) {
      if (direction == KlDirection::teacher_student) {
        double row = 0.0;
        for (int c = 0; c < classes; ++c)
          if (q(i, c) > 0.0) row += q(i, c) * (log_q(i, c) - log_p(i, c));
        kld += row;
        d_kl.row(i) = p.row(i) - q.row(i);
      } else {
        double row = 0.0;
        for (int c = 0; c < classes; ++c)
          if (p(i, c) > 0.0) row += p(i, c) * (log_p(i, c) - log_q(i, c));
        kld += row;
        for (int c = 0; c < classes; ++c) d_kl(i, c) = p(i, c) * (log_p(i, c) - log_q(i, c) - row);
      }
    }
    kld *= inv_n;
    d_kl *= inv_n;
  }

  const std::size_t depth = model.layers.size();
  ws.deltas.resize(depth);
  ws.grads.resize(depth);
  ws.deltas[depth - 1] = (1.0 - alpha) * d_ce;
  if (alpha > 0.0) ws.deltas[depth - 1] += alpha * d_kl;
  for (std::size_t l = depth; l-- > 0;) {
    const Matrix& input = acts[l];
    const Matrix& delta = ws.deltas[l];
    ws.grads[l].weight.noalias() = input.transpose() * delta;
    ws.grads[l].bias = delta.colwise().sum();
    if (l > 0) {
      Matrix& back = ws.deltas[l - 1];
      back.noalias() = delta * model.layers[l].weight.transpose();
      back = (input.array() > 0.0).select(back, 0.0);
    }
  }
  return {(1.0 - alpha) * ce + alpha * kld, ce, kld, alpha};
}

inline LossAndGrad loss_and_grad(const MlpClassifier& model, const Matrix& batch, const std::vector<int>& labels,
                                 const Matrix* teacher_logits, double alpha,
                                 KlDirection direction = KlDirection::teacher_student) {
  Workspace ws;
  const LossBreakdown loss = loss_and_grad(model, batch, labels, teacher_logits, alpha, direction, ws);
  return {loss, std::move(ws.grads)};
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { sgd, adam };

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  OptimizerSettings settings;
  long step = 0;
  Gradients m;  // first moments (adam)
  Gradients v;  // second moments (adam)
};

inline OptimizerState make_optimizer(const OptimizerSettings& s) {
  if (!(s.learning_rate > 0.0)) throw Error("optimizer: learning rate must be > 0");
  return OptimizerState{s, 0, {}, {}};
}

inline void optimizer_step(MlpClassifier& model, const Gradients& grads, OptimizerState& state) {
  if (grads.size() != model.layers.size()) throw Error("optimizer_step: gradient layer count mismatch");
  for (std::size_t l = 0; l < grads.size(); ++l)
    if (grads[l].weight.rows() != model.layers[l].weight.rows() || grads[l].weight.cols() != model.layers[l].weight.cols() ||
        grads[l].bias.size() != model.layers[l].bias.size())
      throw Error("optimizer_step: gradient shape mismatch at layer " + std::to_string(l));

  const auto& s = state.settings;
  if (s.kind == OptimizerKind::sgd) {
    for (std::size_t l = 0; l < grads.size(); ++l) {
      model.layers[l].weight -= s.learning_rate * grads[l].weight;
      model.layers[l].bias -= s.learning_rate * grads[l].bias;
    }
    ++state.step;
    return;
  }

  if (state.m.empty()) {
    for (const auto& l : model.layers) {
      state.m.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), RowVector::Zero(l.bias.size())});
      state.v.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), RowVector::Zero(l.bias.size())});
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  const double step_size = s.learning_rate / c1;
  const double inv_c2 = 1.0 / c2;
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    double* P = param.data();
    double* M = m.data();
    double* V = v.data();
    const double* G = g.data();
    for (Index i = 0, n = param.size(); i < n; ++i) {
      M[i] = s.beta1 * M[i] + (1.0 - s.beta1) * G[i];
      V[i] = s.beta2 * V[i] + (1.0 - s.beta2) * G[i] * G[i];
      P[i] -= step_size * M[i] / (std::sqrt(V[i] * inv_c2) + s.epsilon);
    }
  };
  for (std::size_t l = 0; l < grads.size(); ++l) {
    update(model.layers[l].weight, state.m[l].weight, state.v[l].weight, grads[l].weight);
    update(model.layers[l].bias, state.m[l].bias, state.v[l].bias, grads[l].bias);
  }
}

// ---------------------------------------------------------------------------
// Inference

/// Argmax of the logits; ties go to the smallest class index.
inline std::vector<int> predict(const MlpClassifier& model, const Matrix& batch) {
  const Matrix logits = forward(model, batch);
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Index i = 0; i < logits.rows(); ++i) out[static_cast<std::size_t>(i)] = static_cast<int>(argmax_first(logits.row(i)));
  return out;
}

/// Percent of correctly classified samples.
inline double accuracy(const MlpClassifier& model, const LatentDataset& ds) {
  if (ds.empty()) throw Error("accuracy: empty dataset '" + ds.domain_id + "'");
  const auto pred = predict(model, ds.features);
  Index correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ds.labels[i];
  return 100.0 * static_cast<double>(correct) / static_cast<double>(ds.size());
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json to_json(const MlpClassifier& m) {
  const Vector flat = m.flatten();
  return {{"format_version", 1},
          {"layer_dims", m.layer_dims},
          {"activation", "relu"},
          {"parameters", std::vector<double>(flat.data(), flat.data() + flat.size())}};
}

inline MlpClassifier mlp_from_json(const nlohmann::json& j) {
  if (j.value("format_version", 0) != 1) throw Error("checkpoint: unsupported format_version");
  if (j.value("activation", "") != "relu") throw Error("checkpoint: unsupported activation");
  const auto dims = j.at("layer_dims").get<std::vector<int>>();
  if (dims.size() < 2) throw Error("checkpoint: need at least input and output dims");
  MlpClassifier m;
  m.layer_dims = dims;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l)
    m.layers.push_back({Matrix::Zero(dims[l], dims[l + 1]), RowVector::Zero(dims[l + 1])});
  const auto params = j.at("parameters").get<std::vector<double>>();
  m.assign(Eigen::Map<const Vector>(params.data(), static_cast<Index>(params.size())));
  return m;
}

}  // namespace glr

#endif  // GLR_CLASSIFIER_HPP
