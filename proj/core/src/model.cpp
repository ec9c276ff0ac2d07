#include "mad/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mad/autodiff.hpp"
#include "mad/dual.hpp"
#include "mad/errors.hpp"

namespace mad {

std::string to_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

LabeledImages LabeledImages::subset(std::span<const std::size_t> indices) const {
  LabeledImages out;
  out.shape = shape;
  out.pixels.reserve(indices.size() * shape.size());
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(image(i), labels.at(i));
  return out;
}

LabeledImages LabeledImages::slice(std::size_t begin, std::size_t end) const {
  LabeledImages out;
  out.shape = shape;
  end = std::min(end, count());
  if (begin >= end) return out;
  const std::size_t sz = shape.size();
  out.pixels.assign(pixels.begin() + begin * sz, pixels.begin() + end * sz);
  out.labels.assign(labels.begin() + begin, labels.begin() + end);
  return out;
}

Tensor<double> to_tensor(std::span<const float> pixels, std::size_t count, const ImageShape& shape) {
  Tensor<double> t({count, shape.channels, shape.height, shape.width});
  if (pixels.size() != t.size()) throw DataError("image buffer size does not match shape");
  std::copy(pixels.begin(), pixels.end(), t.data.begin());
  return t;
}

Tensor<double> to_tensor(const LabeledImages& images) {
  return to_tensor(images.pixels, images.count(), images.shape);
}

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::kSmallCnn: return "small_cnn";
    case Architecture::kResnet18Like: return "resnet18_like";
    case Architecture::kAlexnetLike: return "alexnet_like";
  }
  return "unknown";
}

Architecture parse_architecture(const std::string& id) {
  if (id == "small_cnn") return Architecture::kSmallCnn;
  if (id == "resnet18_like") return Architecture::kResnet18Like;
  if (id == "alexnet_like") return Architecture::kAlexnetLike;
  throw ConfigError("unknown architecture_id '" + id + "'");
}

int ModelSpec::effective_width() const {
  if (width > 0) return width;
  switch (architecture) {
    case Architecture::kSmallCnn: return 8;
    case Architecture::kResnet18Like: return 4;
    case Architecture::kAlexnetLike: return 4;
  }
  return 8;
}

void ModelSpec::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (input_shape.channels == 0 || input_shape.height == 0 || input_shape.width == 0) {
    throw ConfigError("input_shape dimensions must be positive");
  }
  if (width < 0) throw ConfigError("width must be non-negative");
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (optimizer == Optimizer::kSgdMomentum && !(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("momentum must be in [0,1)");
  }
}

bool ModelState::all_finite() const {
  return std::all_of(params.begin(), params.end(), [](double v) { return std::isfinite(v); });
}

namespace {

// Hands out parameter leaves in declaration order. In collect mode it records
// the layout and feeds zeros.
template <class T>
class ParamFeed {
 public:
  explicit ParamFeed(std::span<const T> params) : params_(params), collect_(false) {}
  ParamFeed() : collect_(true) {}

  typename Tape<T>::Id get(Tape<T>& tape, const std::string& name, Shape shape, bool requires_grad) {
    const std::size_t n = numel(shape);
    if (collect_) {
      layout_.push_back({name, shape, offset_, n});
      offset_ += n;
      return tape.leaf(Tensor<T>(std::move(shape), T(0.0)), false);
    }
    if (offset_ + n > params_.size()) throw DataError("parameter vector too short for model spec");
    Tensor<T> t(std::move(shape));
    std::copy(params_.begin() + offset_, params_.begin() + offset_ + n, t.data.begin());
    offset_ += n;
    ids_.push_back(tape.leaf(std::move(t), requires_grad));
    return ids_.back();
  }

  std::size_t consumed() const { return offset_; }
  const std::vector<ParamInfo>& layout() const { return layout_; }
  const std::vector<typename Tape<T>::Id>& ids() const { return ids_; }

 private:
  std::span<const T> params_;
  bool collect_;
  std::size_t offset_ = 0;
  std::vector<ParamInfo> layout_;
  std::vector<typename Tape<T>::Id> ids_;
};

template <class T>
class GraphBuilder {
 public:
  using Id = typename Tape<T>::Id;

  GraphBuilder(Tape<T>& tape, ParamFeed<T>& feed, bool param_grads)
      : tape_(tape), feed_(feed), rg_(param_grads) {}

  Id conv(const std::string& name, Id x, std::size_t out_ch, std::size_t k, std::size_t stride,
          std::size_t pad) {
    const std::size_t in_ch = tape_.value(x).shape[1];
    Id w = feed_.get(tape_, name + ".weight", {out_ch, in_ch, k, k}, rg_);
    Id b = feed_.get(tape_, name + ".bias", {out_ch}, rg_);
    return tape_.conv2d(x, w, b, stride, pad);
  }

  Id dense(const std::string& name, Id x, std::size_t out) {
    const std::size_t in = tape_.value(x).shape[1];
    Id w = feed_.get(tape_, name + ".weight", {out, in}, rg_);
    Id b = feed_.get(tape_, name + ".bias", {out}, rg_);
    return tape_.dense(x, w, b);
  }

  Tape<T>& tape() { return tape_; }

 private:
  Tape<T>& tape_;
  ParamFeed<T>& feed_;
  bool rg_;
};

template <class T>
typename Tape<T>::Id small_cnn(GraphBuilder<T>& g, typename Tape<T>::Id x, std::size_t w,
                               std::size_t classes) {
  auto& t = g.tape();
  auto h = t.maxpool2(t.relu(g.conv("conv1", x, w, 3, 1, 1)));
  h = t.maxpool2(t.relu(g.conv("conv2", h, 2 * w, 3, 1, 1)));
  h = t.relu(g.dense("fc1", t.flatten(h), 8 * w));
  return g.dense("fc2", h, classes);
}

template <class T>
typename Tape<T>::Id basic_block(GraphBuilder<T>& g, const std::string& name,
                                 typename Tape<T>::Id x, std::size_t out_ch, std::size_t stride) {
  auto& t = g.tape();
  const std::size_t in_ch = t.value(x).shape[1];
  auto h = t.relu(g.conv(name + ".conv1", x, out_ch, 3, stride, 1));
  h = g.conv(name + ".conv2", h, out_ch, 3, 1, 1);
  auto shortcut = x;
  if (stride != 1 || in_ch != out_ch) shortcut = g.conv(name + ".shortcut", x, out_ch, 1, stride, 0);
  return t.relu(t.add(h, shortcut));
}

// ResNet-18 topology (stem + 4 stages x 2 basic blocks) at reduced width, no batch norm.
template <class T>
typename Tape<T>::Id resnet18_like(GraphBuilder<T>& g, typename Tape<T>::Id x, std::size_t w,
                                   std::size_t classes) {
  auto& t = g.tape();
  auto h = t.relu(g.conv("stem", x, w, 3, 1, 1));
  const std::size_t widths[4] = {w, 2 * w, 4 * w, 8 * w};
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t stride = s == 0 ? 1 : 2;
    const std::string stage = "layer" + std::to_string(s + 1);
    h = basic_block(g, stage + ".0", h, widths[s], stride);
    h = basic_block(g, stage + ".1", h, widths[s], 1);
  }
  return g.dense("fc", t.global_avgpool(h), classes);
}

// AlexNet topology (5 conv + 3 dense) at reduced width, 3x3 kernels, no dropout.
template <class T>
typename Tape<T>::Id alexnet_like(GraphBuilder<T>& g, typename Tape<T>::Id x, std::size_t w,
                                  std::size_t classes) {
  auto& t = g.tape();
  auto h = t.maxpool2(t.relu(g.conv("features.0", x, w, 3, 1, 1)));
  h = t.maxpool2(t.relu(g.conv("features.1", h, 2 * w, 3, 1, 1)));
  h = t.relu(g.conv("features.2", h, 4 * w, 3, 1, 1));
  h = t.relu(g.conv("features.3", h, 4 * w, 3, 1, 1));
  h = t.maxpool2(t.relu(g.conv("features.4", h, 2 * w, 3, 1, 1)));
  h = t.relu(g.dense("classifier.0", t.flatten(h), 8 * w));
  h = t.relu(g.dense("classifier.1", h, 8 * w));
  return g.dense("classifier.2", h, classes);
}

template <class T>
typename Tape<T>::Id build_graph(const ModelSpec& spec, GraphBuilder<T>& g, typename Tape<T>::Id x) {
  const auto w = static_cast<std::size_t>(spec.effective_width());
  const auto n = static_cast<std::size_t>(spec.num_classes);
  switch (spec.architecture) {
    case Architecture::kSmallCnn: return small_cnn(g, x, w, n);
    case Architecture::kResnet18Like: return resnet18_like(g, x, w, n);
    case Architecture::kAlexnetLike: return alexnet_like(g, x, w, n);
  }
  throw ConfigError("unknown architecture");
}

template <class T>
struct Forward {
  Tape<T> tape;
  typename Tape<T>::Id input = 0;
  typename Tape<T>::Id logits = 0;
  std::vector<typename Tape<T>::Id> params;
};

template <class T>
void run_forward(Forward<T>& f, const ModelSpec& spec, std::span<const T> params, Tensor<T> x,
                 bool input_grad, bool param_grads) {
  ParamFeed<T> feed(params);
  GraphBuilder<T> g(f.tape, feed, param_grads);
  f.input = f.tape.leaf(std::move(x), input_grad);
  f.logits = build_graph(spec, g, f.input);
  if (feed.consumed() != params.size()) throw DataError("parameter vector does not match model spec");
  f.params = feed.ids();
}

void check_batch(const ModelSpec& spec, const Tensor<double>& x) {
  const auto& s = spec.input_shape;
  if (x.shape.size() != 4 || x.shape[1] != s.channels || x.shape[2] != s.height ||
      x.shape[3] != s.width) {
    throw DataError("input batch shape " + to_string(x.shape) + " does not match model input (" +
                    std::to_string(s.channels) + "," + std::to_string(s.height) + "," +
                    std::to_string(s.width) + ")");
  }
}

template <class T>
T ce_loss(const std::vector<T>& logits, std::span<const int> labels, std::size_t n,
          std::vector<T>* dlogits) {
  using std::exp;
  using std::log;
  const std::size_t N = labels.size();
  if (dlogits) dlogits->assign(N * n, T(0.0));
  T total(0.0);
  const double invN = 1.0 / static_cast<double>(N);
  for (std::size_t i = 0; i < N; ++i) {
    const T* z = &logits[i * n];
    T m = z[0];
    for (std::size_t k = 1; k < n; ++k)
      if (value_of(z[k]) > value_of(m)) m = z[k];
    T sum(0.0);
    std::vector<T> e(n);
    for (std::size_t k = 0; k < n; ++k) {
      e[k] = exp(z[k] - m);
      sum += e[k];
    }
    const auto y = static_cast<std::size_t>(labels[i]);
    total += log(sum) + m - z[y];
    if (dlogits) {
      for (std::size_t k = 0; k < n; ++k) {
        T p = e[k] / sum;
        if (k == y) p -= T(1.0);
        (*dlogits)[i * n + k] = p * T(invN);
      }
    }
  }
  return total * T(invN);
}

template <class T>
T kl_loss(const std::vector<T>& logits, std::span<const double> reference, std::size_t n,
          std::vector<T>* dlogits) {
  using std::exp;
  using std::log;
  const std::size_t N = logits.size() / n;
  if (dlogits) dlogits->assign(N * n, T(0.0));
  T total(0.0);
  const double invN = 1.0 / static_cast<double>(N);
  std::vector<double> pref(n);
  std::vector<T> e(n);
  for (std::size_t i = 0; i < N; ++i) {
    const double* r = &reference[i * n];
    const double rm = *std::max_element(r, r + n);
    double rs = 0.0;
    for (std::size_t k = 0; k < n; ++k) rs += std::exp(r[k] - rm);
    const double rlse = std::log(rs) + rm;
    const T* z = &logits[i * n];
    T m = z[0];
    for (std::size_t k = 1; k < n; ++k)
      if (value_of(z[k]) > value_of(m)) m = z[k];
    T sum(0.0);
    for (std::size_t k = 0; k < n; ++k) {
      e[k] = exp(z[k] - m);
      sum += e[k];
    }
    const T lse = log(sum) + m;
    for (std::size_t k = 0; k < n; ++k) {
      const double logp_ref = r[k] - rlse;
      pref[k] = std::exp(logp_ref);
      // p_ref * (log p_ref - log p)
      total += T(pref[k]) * (T(logp_ref) - (z[k] - lse));
    }
    if (dlogits) {
      for (std::size_t k = 0; k < n; ++k) (*dlogits)[i * n + k] = (e[k] / sum - T(pref[k])) * T(invN);
    }
  }
  return total * T(invN);
}

template <class T>
T compute_loss(const std::vector<T>& logits, std::span<const int> labels, std::size_t n,
               const LossSpec& loss, std::vector<T>* dlogits) {
  if (loss.kind == LossKind::kCrossEntropy) {
    if (loss.reference_logits) throw ConfigError("reference logits given for cross-entropy loss");
    return ce_loss(logits, labels, n, dlogits);
  }
  if (!loss.reference_logits) throw ConfigError("kl_to_reference requires reference logits");
  if (loss.reference_logits->size() != logits.size()) {
    throw DataError("reference logits shape does not match batch");
  }
  return kl_loss(logits, *loss.reference_logits, n, dlogits);
}

void check_labels(std::span<const int> labels, int n) {
  for (int y : labels) {
    if (y < 0 || y >= n) {
      throw DataError("label " + std::to_string(y) + " out of range [0," + std::to_string(n) + ")");
    }
  }
}

constexpr std::size_t kChunk = 256;

}  // namespace

std::vector<ParamInfo> parameter_layout(const ModelSpec& spec) {
  spec.validate();
  Forward<double> f;
  ParamFeed<double> feed;
  GraphBuilder<double> g(f.tape, feed, false);
  const auto& s = spec.input_shape;
  auto x = f.tape.leaf(Tensor<double>({1, s.channels, s.height, s.width}, 0.0), false);
  build_graph(spec, g, x);
  return feed.layout();
}

ModelState build_model(const ModelSpec& spec, std::uint64_t seed) {
  const auto layout = parameter_layout(spec);
  ModelState state;
  state.spec = spec;
  state.seed = seed;
  state.params.assign(layout.empty() ? 0 : layout.back().offset + layout.back().size, 0.0);
  std::mt19937_64 rng(seed);
  for (std::size_t li = 0; li < layout.size(); ++li) {
    const auto& p = layout[li];
    if (p.shape.size() < 2) continue;  // biases start at zero
    const std::size_t fan_in = p.size / p.shape[0];
    const bool last = li + 2 == layout.size();
    const double stddev = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(fan_in));
    std::normal_distribution<double> dist(0.0, stddev);
    for (std::size_t i = 0; i < p.size; ++i) state.params[p.offset + i] = dist(rng);
  }
  return state;
}

std::vector<double> compute_logits(const ModelSpec& spec, std::span<const double> params,
                                   const Tensor<double>& x) {
  check_batch(spec, x);
  const std::size_t N = x.shape[0];
  const std::size_t per = x.size() / std::max<std::size_t>(N, 1);
  std::vector<double> out;
  out.reserve(N * static_cast<std::size_t>(spec.num_classes));
  for (std::size_t b = 0; b < N; b += kChunk) {
    const std::size_t e = std::min(N, b + kChunk);
    Tensor<double> chunk({e - b, x.shape[1], x.shape[2], x.shape[3]});
    std::copy(x.data.begin() + b * per, x.data.begin() + e * per, chunk.data.begin());
    Forward<double> f;
    run_forward<double>(f, spec, params, std::move(chunk), false, false);
    const auto& z = f.tape.value(f.logits).data;
    out.insert(out.end(), z.begin(), z.end());
  }
  for (double v : out) {
    if (!std::isfinite(v)) throw NumericError("non-finite logits");
  }
  return out;
}

std::vector<double> compute_logits(const ModelState& model, const LabeledImages& batch) {
  return compute_logits(model.spec, model.params, to_tensor(batch));
}

std::vector<int> predict(const ModelState& model, const LabeledImages& batch) {
  const auto z = compute_logits(model, batch);
  const auto n = static_cast<std::size_t>(model.spec.num_classes);
  std::vector<int> out(batch.count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<int>(std::max_element(z.begin() + i * n, z.begin() + (i + 1) * n) -
                              (z.begin() + i * n));
  }
  return out;
}

double softmax_cross_entropy(std::span<const double> logits, std::span<const int> labels,
                             std::size_t num_classes, std::vector<double>* dlogits) {
  std::vector<double> z(logits.begin(), logits.end());
  return ce_loss(z, labels, num_classes, dlogits);
}

double kl_to_reference(std::span<const double> logits, std::span<const double> reference,
                       std::size_t num_classes, std::vector<double>* dlogits) {
  std::vector<double> z(logits.begin(), logits.end());
  return kl_loss(z, reference, num_classes, dlogits);
}

LossAndGrad loss_and_grad(const ModelSpec& spec, std::span<const double> params,
                          const LabeledImages& batch, const LossSpec& loss) {
  if (batch.empty()) throw DataError("loss_and_grad: empty batch");
  if (!(batch.shape == spec.input_shape)) throw DataError("loss_and_grad: image shape mismatch");
  check_labels(batch.labels, spec.num_classes);
  Forward<double> f;
  run_forward<double>(f, spec, params, to_tensor(batch), false, true);
  const auto n = static_cast<std::size_t>(spec.num_classes);
  std::vector<double> dlogits;
  LossAndGrad out;
  out.loss = compute_loss(f.tape.value(f.logits).data, batch.labels, n, loss, &dlogits);
  f.tape.backward(f.logits, Tensor<double>(f.tape.value(f.logits).shape, std::move(dlogits)));
  out.grad.reserve(params.size());
  for (auto id : f.params) {
    const auto g = f.tape.grad(id);
    out.grad.insert(out.grad.end(), g.data.begin(), g.data.end());
  }
  return out;
}

LossAndGrad loss_and_grad(const ModelState& model, const LabeledImages& batch, const LossSpec& loss) {
  return loss_and_grad(model.spec, model.params, batch, loss);
}

double loss_value(const ModelSpec& spec, std::span<const double> params, const LabeledImages& batch,
                  const LossSpec& loss) {
  if (batch.empty()) throw DataError("loss_value: empty batch");
  check_labels(batch.labels, spec.num_classes);
  const auto z = compute_logits(spec, params, to_tensor(batch));
  return compute_loss<double>(z, batch.labels, static_cast<std::size_t>(spec.num_classes), loss,
                              nullptr);
}

std::vector<double> hessian_vector_product(const ModelSpec& spec, std::span<const double> params,
                                           const LabeledImages& batch, std::span<const double> v,
                                           const LossSpec& loss) {
  if (v.size() != params.size()) throw DataError("hvp: direction size mismatch");
  if (batch.empty()) throw DataError("hvp: empty batch");
  check_labels(batch.labels, spec.num_classes);
  std::vector<Dual> dp(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) dp[i] = Dual(params[i], v[i]);
  const auto xd = to_tensor(batch);
  Tensor<Dual> x(xd.shape);
  for (std::size_t i = 0; i < xd.size(); ++i) x.data[i] = Dual(xd.data[i]);
  Forward<Dual> f;
  run_forward<Dual>(f, spec, std::span<const Dual>(dp), std::move(x), false, true);
  std::vector<Dual> dlogits;
  compute_loss(f.tape.value(f.logits).data, batch.labels, static_cast<std::size_t>(spec.num_classes),
               loss, &dlogits);
  f.tape.backward(f.logits, Tensor<Dual>(f.tape.value(f.logits).shape, std::move(dlogits)));
  std::vector<double> out;
  out.reserve(params.size());
  for (auto id : f.params) {
    const auto g = f.tape.grad(id);
    for (const auto& d : g.data) out.push_back(d.d);
  }
  return out;
}

Tensor<double> logits_vjp(const ModelSpec& spec, std::span<const double> params,
                          const Tensor<double>& x, std::span<const double> dlogits) {
  check_batch(spec, x);
  const std::size_t N = x.shape[0];
  const auto n = static_cast<std::size_t>(spec.num_classes);
  if (dlogits.size() != N * n) throw DataError("logits_vjp: cotangent shape mismatch");
  Tensor<double> out(x.shape, 0.0);
  const std::size_t per = x.size() / std::max<std::size_t>(N, 1);
  for (std::size_t b = 0; b < N; b += kChunk) {
    const std::size_t e = std::min(N, b + kChunk);
    Tensor<double> chunk({e - b, x.shape[1], x.shape[2], x.shape[3]});
    std::copy(x.data.begin() + b * per, x.data.begin() + e * per, chunk.data.begin());
    Forward<double> f;
    run_forward<double>(f, spec, params, std::move(chunk), true, false);
    Tensor<double> seed(f.tape.value(f.logits).shape);
    std::copy(dlogits.begin() + b * n, dlogits.begin() + e * n, seed.data.begin());
    f.tape.backward(f.logits, std::move(seed));
    const auto g = f.tape.grad(f.input);
    std::copy(g.data.begin(), g.data.end(), out.data.begin() + b * per);
  }
  return out;
}

Tensor<double> input_grad(const ModelState& model, const Tensor<double>& x,
                          std::span<const int> labels, const LossSpec& loss) {
  check_batch(model.spec, x);
  if (labels.size() != x.shape[0]) throw DataError("input_grad: label count mismatch");
  if (labels.empty()) throw DataError("input_grad: empty batch");
  check_labels(labels, model.spec.num_classes);
  const auto z = compute_logits(model.spec, model.params, x);
  std::vector<double> dlogits;
  compute_loss<double>(z, labels, static_cast<std::size_t>(model.spec.num_classes), loss, &dlogits);
  return logits_vjp(model.spec, model.params, x, dlogits);
}

void validate_examples(const ModelSpec& spec, const LabeledImages& examples) {
  if (!(examples.shape == spec.input_shape)) throw DataError("example image shape does not match model");
  if (examples.pixels.size() != examples.count() * examples.shape.size()) {
    throw DataError("pixel buffer size does not match example count");
  }
  check_labels(examples.labels, spec.num_classes);
}

double evaluate_accuracy(const ModelState& model, const LabeledImages& examples) {
  if (examples.empty()) throw DataError("evaluate_accuracy: empty example set");
  validate_examples(model.spec, examples);
  const auto pred = predict(model, examples);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == examples.labels[i];
  return 100.0 * static_cast<double>(correct) / static_cast<double>(examples.count());
}

ModelState train_sgd(const ModelState& model, const LabeledImages& train, const TrainConfig& cfg,
                     const BatchHook& hook) {
  cfg.validate();
  ModelState state = model;
  if (cfg.epochs == 0) return state;
  if (train.empty()) throw DataError("training set is empty");
  validate_examples(model.spec, train);

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.count());
  std::vector<double> velocity;
  if (cfg.optimizer == Optimizer::kSgdMomentum) velocity.assign(state.params.size(), 0.0);
  auto epoch_losses = nlohmann::json::array();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t seen = 0, step = 0;
    for (std::size_t b = 0; b < order.size(); b += bs, ++step) {
      const std::size_t e = std::min(order.size(), b + bs);
      auto batch = train.subset(std::span<const std::size_t>(order).subspan(b, e - b));
      if (hook) hook(batch, state, static_cast<std::size_t>(epoch), step);
      auto lg = loss_and_grad(state, batch);
      if (!std::isfinite(lg.loss)) {
        throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch));
      }
      for (std::size_t i = 0; i < state.params.size(); ++i) {
        double g = lg.grad[i];
        if (!velocity.empty()) {
          velocity[i] = cfg.momentum * velocity[i] + g;
          g = velocity[i];
        }
        state.params[i] -= cfg.learning_rate * g;
      }
      loss_sum += lg.loss * static_cast<double>(batch.count());
      seen += batch.count();
    }
    epoch_losses.push_back(loss_sum / static_cast<double>(seen));
  }
  if (!state.all_finite()) throw NumericError("training diverged: non-finite parameters");
  const int previous = state.training_meta.value("epochs_run", 0);
  state.training_meta["epochs_run"] = previous + cfg.epochs;
  state.training_meta["epoch_loss"] = epoch_losses;
  state.training_meta["final_loss"] = epoch_losses.back();
  return state;
}

ModelState train_clean(const ModelState& model, const LabeledImages& train, const TrainConfig& cfg) {
  return train_sgd(model, train, cfg, {});
}

}  // namespace mad
