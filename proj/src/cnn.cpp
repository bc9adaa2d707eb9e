#include "hsi/cnn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "hsi/hsio.hpp"
#include "hsi/rng.hpp"

namespace hsi {

using nlohmann::json;

void CnnArch::validate() const {
  if (input_channels != 1) throw ConfigError("cnn: input_channels must be 1 (probability maps)");
  if (enc_channels.empty()) throw ConfigError("cnn: need at least one encoder level");
  for (Index c : enc_channels) {
    if (c < 1) throw ConfigError("cnn: channel counts must be >= 1");
  }
  if (bottleneck_channels < 1) throw ConfigError("cnn: channel counts must be >= 1");
  const Index factor = Index{1} << enc_channels.size();
  if (tile < factor || tile % factor != 0) {
    throw ConfigError("cnn: tile side must be divisible by 2^levels");
  }
}

json CnnArch::to_json() const {
  return {{"input_channels", input_channels},
          {"enc_channels", enc_channels},
          {"bottleneck_channels", bottleneck_channels},
          {"kernel", 3},
          {"pool", 2},
          {"tile", tile}};
}

CnnArch CnnArch::from_json(const json& j) {
  CnnArch a;
  try {
    a.input_channels = j.value("input_channels", a.input_channels);
    a.enc_channels = j.value("enc_channels", a.enc_channels);
    a.bottleneck_channels = j.value("bottleneck_channels", a.bottleneck_channels);
    a.tile = j.value("tile", a.tile);
    if (j.value("kernel", 3) != 3 || j.value("pool", 2) != 2) throw ConfigError("cnn: only 3x3 kernels and 2x2 pooling");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("cnn arch: ") + e.what());
  }
  a.validate();
  return a;
}

Index TensorShape::size() const {
  Index n = 1;
  for (Index d : dims) n *= d;
  return n;
}

std::vector<TensorShape> parameter_layout(const CnnArch& arch) {
  std::vector<TensorShape> out;
  const auto conv = [&](const std::string& name, Index cout, Index cin, Index k) {
    out.push_back({name + ".weight", {cout, cin, k, k}});
    out.push_back({name + ".bias", {cout}});
  };
  const auto levels = static_cast<Index>(arch.enc_channels.size());
  Index prev = arch.input_channels;
  for (Index l = 0; l < levels; ++l) {
    const Index c = arch.enc_channels[static_cast<std::size_t>(l)];
    conv("enc" + std::to_string(l) + ".conv1", c, prev, 3);
    conv("enc" + std::to_string(l) + ".conv2", c, c, 3);
    prev = c;
  }
  conv("bottleneck.conv1", arch.bottleneck_channels, prev, 3);
  conv("bottleneck.conv2", arch.bottleneck_channels, arch.bottleneck_channels, 3);
  prev = arch.bottleneck_channels;
  for (Index l = levels - 1; l >= 0; --l) {
    const Index c = arch.enc_channels[static_cast<std::size_t>(l)];
    conv("dec" + std::to_string(l) + ".up", c, prev, 2);
    conv("dec" + std::to_string(l) + ".conv1", c, 2 * c, 3);
    conv("dec" + std::to_string(l) + ".conv2", c, c, 3);
    prev = c;
  }
  conv("head", 1, prev, 1);
  return out;
}

namespace {

template <typename S>
using Feat = RowMajorMatrix<S>;  // channels x (H*W)

// Parameter slots, following parameter_layout.
struct Slots {
  Index levels;
  std::size_t enc(Index l) const { return static_cast<std::size_t>(4 * l); }
  std::size_t bottleneck() const { return static_cast<std::size_t>(4 * levels); }
  std::size_t dec(Index l) const { return static_cast<std::size_t>(4 * levels + 4 + 6 * (levels - 1 - l)); }
  std::size_t head() const { return static_cast<std::size_t>(4 * levels + 4 + 6 * levels); }
};

template <typename S>
Eigen::Map<const Feat<S>> weight_matrix(const Vector<S>& w, Index cout) {
  return Eigen::Map<const Feat<S>>(w.data(), cout, w.size() / cout);
}

template <typename S>
Eigen::Map<Feat<S>> weight_matrix(Vector<S>& w, Index cout) {
  return Eigen::Map<Feat<S>>(w.data(), cout, w.size() / cout);
}

template <typename S>
void im2col(const Feat<S>& in, Index h, Index w, Feat<S>& col) {
  const Index cin = in.rows();
  col.setZero(cin * 9, h * w);
  for (Index ci = 0; ci < cin; ++ci) {
    for (Index ky = 0; ky < 3; ++ky) {
      for (Index kx = 0; kx < 3; ++kx) {
        const Index row = ci * 9 + ky * 3 + kx;
        const Index dy = ky - 1;
        const Index dx = kx - 1;
        const Index x0 = std::max<Index>(0, -dx);
        const Index x1 = std::min<Index>(w, w - dx);
        for (Index y = 0; y < h; ++y) {
          const Index sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const S* src = in.row(ci).data() + sy * w + dx;
          S* dst = col.row(row).data() + y * w;
          for (Index x = x0; x < x1; ++x) dst[x] = src[x];
        }
      }
    }
  }
}

template <typename S>
void col2im(const Feat<S>& col, Index cin, Index h, Index w, Feat<S>& out) {
  out.setZero(cin, h * w);
  for (Index ci = 0; ci < cin; ++ci) {
    for (Index ky = 0; ky < 3; ++ky) {
      for (Index kx = 0; kx < 3; ++kx) {
        const Index row = ci * 9 + ky * 3 + kx;
        const Index dy = ky - 1;
        const Index dx = kx - 1;
        const Index x0 = std::max<Index>(0, -dx);
        const Index x1 = std::min<Index>(w, w - dx);
        for (Index y = 0; y < h; ++y) {
          const Index sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          S* dst = out.row(ci).data() + sy * w + dx;
          const S* src = col.row(row).data() + y * w;
          for (Index x = x0; x < x1; ++x) dst[x] += src[x];
        }
      }
    }
  }
}

template <typename S>
struct ConvPairCache {
  Feat<S> col1, a1, col2, a2;
};

template <typename S>
struct SampleCache {
  std::vector<ConvPairCache<S>> enc;
  std::vector<std::vector<std::int32_t>> argmax;
  ConvPairCache<S> bottleneck;
  std::vector<ConvPairCache<S>> dec;  // indexed by level
  std::vector<Feat<S>> up_input;      // indexed by level
  Feat<S> logits;
  Feat<S> probs;
};

template <typename S>
class Network {
 public:
  explicit Network(const CnnModel<S>& model)
      : model_(model), slots_{static_cast<Index>(model.arch.enc_channels.size())} {}

  /// Forward pass for one side x side map, filling `cache`.
  void forward(const RowMajorMatrix<S>& input, SampleCache<S>& cache) const {
    const auto& arch = model_.arch;
    const Index levels = slots_.levels;
    Index side = input.rows();
    cache.enc.resize(static_cast<std::size_t>(levels));
    cache.argmax.resize(static_cast<std::size_t>(levels));
    cache.dec.resize(static_cast<std::size_t>(levels));
    cache.up_input.resize(static_cast<std::size_t>(levels));

    Feat<S> x = Eigen::Map<const Feat<S>>(input.data(), 1, input.size());
    for (Index l = 0; l < levels; ++l) {
      auto& c = cache.enc[static_cast<std::size_t>(l)];
      conv_pair(x, side, slots_.enc(l), c);
      x = maxpool(c.a2, side, cache.argmax[static_cast<std::size_t>(l)]);
      side /= 2;
    }
    conv_pair(x, side, slots_.bottleneck(), cache.bottleneck);
    const Feat<S>* a = &cache.bottleneck.a2;
    for (Index l = levels - 1; l >= 0; --l) {
      const auto lu = static_cast<std::size_t>(l);
      const Index ch = arch.enc_channels[lu];
      cache.up_input[lu] = *a;
      Feat<S> up = upconv(*a, side, slots_.dec(l), ch);
      side *= 2;
      Feat<S> cat(2 * ch, side * side);
      cat.topRows(ch) = cache.enc[lu].a2;
      cat.bottomRows(ch) = up;
      conv_pair(cat, side, slots_.dec(l) + 2, cache.dec[lu]);
      a = &cache.dec[lu].a2;
    }
    const auto& hw = model_.params[slots_.head()];
    const S hb = model_.params[slots_.head() + 1][0];
    cache.logits = (weight_matrix(hw, 1) * *a).array() + hb;
    constexpr S lo = std::numeric_limits<S>::min();
    constexpr S hi = S(1) - std::numeric_limits<S>::epsilon() / 2;
    cache.probs = cache.logits.unaryExpr([lo, hi](S z) { return std::clamp(S(1) / (S(1) + std::exp(-z)), lo, hi); });
  }

  /// Accumulates gradients given d loss / d logits for one sample.
  void backward(const SampleCache<S>& cache, const Feat<S>& dlogits, std::vector<Vector<S>>& grads) const {
    const auto& arch = model_.arch;
    const Index levels = slots_.levels;
    const Index full = static_cast<Index>(std::lround(std::sqrt(static_cast<double>(dlogits.cols()))));

    const auto& a_last = cache.dec[0].a2;
    const std::size_t h = slots_.head();
    weight_matrix(grads[h], 1).noalias() += dlogits * a_last.transpose();
    grads[h + 1][0] += dlogits.sum();
    Feat<S> da = weight_matrix(model_.params[h], 1).transpose() * dlogits;

    std::vector<Feat<S>> dskip(static_cast<std::size_t>(levels));
    Index side = full;
    for (Index l = 0; l < levels; ++l) {
      const auto lu = static_cast<std::size_t>(l);
      const Index ch = arch.enc_channels[lu];
      Feat<S> dcat = conv_pair_backward(cache.dec[lu], da, side, slots_.dec(l) + 2, true, grads);
      dskip[lu] = dcat.topRows(ch);
      const Feat<S> dup = dcat.bottomRows(ch);
      side /= 2;
      da = upconv_backward(cache.up_input[lu], dup, side, slots_.dec(l), ch, grads);
    }
    da = conv_pair_backward(cache.bottleneck, da, side, slots_.bottleneck(), true, grads);
    for (Index l = levels - 1; l >= 0; --l) {
      const auto lu = static_cast<std::size_t>(l);
      side *= 2;
      Feat<S> d_a2 = maxpool_backward(da, cache.argmax[lu], cache.enc[lu].a2.rows(), side);
      d_a2 += dskip[lu];
      da = conv_pair_backward(cache.enc[lu], d_a2, side, slots_.enc(l), l > 0, grads);
    }
  }

 private:
  void conv(const Feat<S>& in, Index side, std::size_t slot, Feat<S>& col, Feat<S>& out) const {
    const auto& w = model_.params[slot];
    const auto& b = model_.params[slot + 1];
    im2col(in, side, side, col);
    out.noalias() = weight_matrix(w, b.size()) * col;
    out.colwise() += b;
    out = out.cwiseMax(S(0));
  }

  void conv_pair(const Feat<S>& in, Index side, std::size_t slot, ConvPairCache<S>& c) const {
    conv(in, side, slot, c.col1, c.a1);
    conv(c.a1, side, slot + 2, c.col2, c.a2);
  }

  // d output (post-ReLU) -> d input, accumulating weight gradients.
  Feat<S> conv_backward(const Feat<S>& col, const Feat<S>& a, const Feat<S>& da, Index side, std::size_t slot,
                        bool need_input_grad, std::vector<Vector<S>>& grads) const {
    const Index cout = model_.params[slot + 1].size();
    const Feat<S> dz = (a.array() > S(0)).select(da, S(0));
    weight_matrix(grads[slot], cout).noalias() += dz * col.transpose();
    grads[slot + 1] += dz.rowwise().sum();
    if (!need_input_grad) return {};
    const Feat<S> dcol = weight_matrix(model_.params[slot], cout).transpose() * dz;
    Feat<S> din;
    col2im(dcol, col.rows() / 9, side, side, din);
    return din;
  }

  Feat<S> conv_pair_backward(const ConvPairCache<S>& c, const Feat<S>& da2, Index side, std::size_t slot,
                             bool need_input_grad, std::vector<Vector<S>>& grads) const {
    const Feat<S> da1 = conv_backward(c.col2, c.a2, da2, side, slot + 2, true, grads);
    return conv_backward(c.col1, c.a1, da1, side, slot, need_input_grad, grads);
  }

  static Feat<S> maxpool(const Feat<S>& in, Index side, std::vector<std::int32_t>& argmax) {
    const Index half = side / 2;
    Feat<S> out(in.rows(), half * half);
    argmax.resize(static_cast<std::size_t>(out.size()));
    for (Index c = 0; c < in.rows(); ++c) {
      const S* src = in.row(c).data();
      for (Index y = 0; y < half; ++y) {
        for (Index x = 0; x < half; ++x) {
          Index best = (2 * y) * side + 2 * x;
          for (Index k : {(2 * y) * side + 2 * x + 1, (2 * y + 1) * side + 2 * x, (2 * y + 1) * side + 2 * x + 1}) {
            if (src[k] > src[best]) best = k;
          }
          out(c, y * half + x) = src[best];
          argmax[static_cast<std::size_t>(c * half * half + y * half + x)] = static_cast<std::int32_t>(best);
        }
      }
    }
    return out;
  }

  static Feat<S> maxpool_backward(const Feat<S>& dout, const std::vector<std::int32_t>& argmax, Index channels,
                                  Index side) {
    Feat<S> din = Feat<S>::Zero(channels, side * side);
    const Index cells = dout.cols();
    for (Index c = 0; c < channels; ++c) {
      for (Index i = 0; i < cells; ++i) din(c, argmax[static_cast<std::size_t>(c * cells + i)]) += dout(c, i);
    }
    return din;
  }

  // Weight (cout, cin, 2, 2) viewed as four cout x cin matrices.
  Feat<S> tap(const Vector<S>& w, Index cout, Index cin, Index a, Index b) const {
    Feat<S> m(cout, cin);
    for (Index o = 0; o < cout; ++o) {
      for (Index i = 0; i < cin; ++i) m(o, i) = w[((o * cin + i) * 2 + a) * 2 + b];
    }
    return m;
  }

  Feat<S> upconv(const Feat<S>& in, Index side, std::size_t slot, Index cout) const {
    const auto& w = model_.params[slot];
    const auto& bias = model_.params[slot + 1];
    const Index cin = in.rows();
    const Index big = 2 * side;
    Feat<S> out(cout, big * big);
    for (Index a = 0; a < 2; ++a) {
      for (Index b = 0; b < 2; ++b) {
        const Feat<S> y = tap(w, cout, cin, a, b) * in;
        for (Index o = 0; o < cout; ++o) {
          for (Index i = 0; i < side; ++i) {
            for (Index j = 0; j < side; ++j) out(o, (2 * i + a) * big + 2 * j + b) = y(o, i * side + j) + bias[o];
          }
        }
      }
    }
    return out;
  }

  Feat<S> upconv_backward(const Feat<S>& in, const Feat<S>& dout, Index side, std::size_t slot, Index cout,
                          std::vector<Vector<S>>& grads) const {
    const auto& w = model_.params[slot];
    const Index cin = in.rows();
    const Index big = 2 * side;
    Feat<S> din = Feat<S>::Zero(cin, side * side);
    Feat<S> dy(cout, side * side);
    for (Index a = 0; a < 2; ++a) {
      for (Index b = 0; b < 2; ++b) {
        for (Index o = 0; o < cout; ++o) {
          for (Index i = 0; i < side; ++i) {
            for (Index j = 0; j < side; ++j) dy(o, i * side + j) = dout(o, (2 * i + a) * big + 2 * j + b);
          }
        }
        const Feat<S> dw = dy * in.transpose();
        for (Index o = 0; o < cout; ++o) {
          for (Index i = 0; i < cin; ++i) grads[slot][((o * cin + i) * 2 + a) * 2 + b] += dw(o, i);
        }
        din.noalias() += tap(w, cout, cin, a, b).transpose() * dy;
      }
    }
    grads[slot + 1] += dout.rowwise().sum();
    return din;
  }

  const CnnModel<S>& model_;
  Slots slots_;
};

template <typename S>
void check_batch(const CnnModel<S>& model, std::span<const RowMajorMatrix<S>> batch) {
  for (const auto& m : batch) {
    if (m.rows() != m.cols() || m.rows() != model.arch.tile) {
      throw DataError("cnn: input maps must be " + std::to_string(model.arch.tile) + "x" +
                      std::to_string(model.arch.tile));
    }
  }
}

template <typename S>
void check_targets(std::span<const RowMajorMatrix<S>> preds, std::span<const LabelMask> targets,
                   std::span<const LabelMask> pad_masks) {
  if (preds.size() != targets.size() || (!pad_masks.empty() && pad_masks.size() != preds.size())) {
    throw DataError("cnn: batch, target and mask counts differ");
  }
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (targets[i].rows() != preds[i].rows() || targets[i].cols() != preds[i].cols() ||
        (!pad_masks.empty() && (pad_masks[i].rows() != preds[i].rows() || pad_masks[i].cols() != preds[i].cols()))) {
      throw DataError("cnn: target shape mismatch");
    }
  }
}

}  // namespace

template <typename Scalar>
CnnModel<Scalar> init_model(const CnnArch& arch, std::uint64_t seed) {
  arch.validate();
  CnnModel<Scalar> model;
  model.arch = arch;
  model.init_seed = seed;
  Rng rng(seed);
  for (const auto& shape : parameter_layout(arch)) {
    Vector<Scalar> values = Vector<Scalar>::Zero(shape.size());
    if (shape.dims.size() == 4) {
      const double bound = std::sqrt(6.0 / static_cast<double>(shape.fan_in()));
      for (Index i = 0; i < values.size(); ++i) values[i] = static_cast<Scalar>(bound * (2.0 * rng.uniform() - 1.0));
    }
    model.params.push_back(std::move(values));
  }
  return model;
}

template <typename Scalar>
std::vector<RowMajorMatrix<Scalar>> forward(const CnnModel<Scalar>& model,
                                            std::span<const RowMajorMatrix<Scalar>> batch) {
  check_batch(model, batch);
  Network<Scalar> net(model);
  SampleCache<Scalar> cache;
  std::vector<RowMajorMatrix<Scalar>> out;
  out.reserve(batch.size());
  for (const auto& input : batch) {
    net.forward(input, cache);
    out.push_back(Eigen::Map<const RowMajorMatrix<Scalar>>(cache.probs.data(), input.rows(), input.cols()));
  }
  return out;
}

template <typename Scalar>
double bce_loss(std::span<const RowMajorMatrix<Scalar>> preds, std::span<const LabelMask> targets,
                std::span<const LabelMask> pad_masks) {
  check_targets(preds, targets, pad_masks);
  double sum = 0.0;
  Index count = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (Index p = 0; p < preds[i].size(); ++p) {
      if (!pad_masks.empty() && pad_masks[i].data()[p]) continue;
      const double q = std::clamp(static_cast<double>(preds[i].data()[p]), 1e-7, 1.0 - 1e-7);
      sum -= targets[i].data()[p] ? std::log(q) : std::log(1.0 - q);
      ++count;
    }
  }
  if (count == 0) throw DataError("bce_loss: no unmasked pixels");
  return sum / static_cast<double>(count);
}

template <typename Scalar>
BackwardResult<Scalar> backward(const CnnModel<Scalar>& model, std::span<const RowMajorMatrix<Scalar>> batch,
                                std::span<const LabelMask> targets, std::span<const LabelMask> pad_masks) {
  check_batch(model, batch);
  check_targets(batch, targets, pad_masks);
  BackwardResult<Scalar> result;
  for (const auto& p : model.params) result.grads.push_back(Vector<Scalar>::Zero(p.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    result.pixels += pad_masks.empty() ? batch[i].size() : (pad_masks[i].array() == 0).count();
  }
  if (result.pixels == 0) throw DataError("backward: no unmasked pixels");
  const auto n = static_cast<Scalar>(result.pixels);

  Network<Scalar> net(model);
  SampleCache<Scalar> cache;
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    net.forward(batch[i], cache);
    RowMajorMatrix<Scalar> dlogits(1, batch[i].size());
    for (Index p = 0; p < batch[i].size(); ++p) {
      if (!pad_masks.empty() && pad_masks[i].data()[p]) {
        dlogits(0, p) = Scalar(0);
        continue;
      }
      const Scalar prob = cache.probs(0, p);
      const bool y = targets[i].data()[p] != 0;
      const double q = std::clamp(static_cast<double>(prob), 1e-7, 1.0 - 1e-7);
      loss -= y ? std::log(q) : std::log(1.0 - q);
      dlogits(0, p) = (prob - (y ? Scalar(1) : Scalar(0))) / n;
    }
    net.backward(cache, dlogits, result.grads);
  }
  result.loss = loss / static_cast<double>(result.pixels);
  return result;
}

template <typename Scalar>
void adam_step(CnnModel<Scalar>& model, const std::vector<Vector<Scalar>>& grads, AdamState<Scalar>& state,
               const TrainConfig& cfg) {
  if (grads.size() != model.params.size() || state.m.size() != model.params.size()) {
    throw DataError("adam_step: gradient/state layout mismatch");
  }
  ++state.step;
  const auto b1 = static_cast<Scalar>(cfg.adam_beta1);
  const auto b2 = static_cast<Scalar>(cfg.adam_beta2);
  const auto t = static_cast<double>(state.step);
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(cfg.adam_beta1, t));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(cfg.adam_beta2, t));
  const auto lr = static_cast<Scalar>(cfg.learning_rate);
  const auto eps = static_cast<Scalar>(cfg.adam_eps);
  for (std::size_t k = 0; k < model.params.size(); ++k) {
    auto& m = state.m[k];
    auto& v = state.v[k];
    m = b1 * m + (Scalar(1) - b1) * grads[k];
    v = b2 * v + (Scalar(1) - b2) * grads[k].cwiseAbs2();
    model.params[k].array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("cnn: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("cnn: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("cnn: learning_rate must be > 0");
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.seed = j.value("seed", c.seed);
    c.init_seed = j.value("init_seed", c.init_seed);
    c.split_seed = j.value("split_seed", c.split_seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("cnn train config: ") + e.what());
  }
  c.validate();
  return c;
}

json TrainConfig::to_json() const {
  return {{"epochs", epochs},         {"batch_size", batch_size}, {"learning_rate", learning_rate},
          {"adam_beta1", adam_beta1}, {"adam_beta2", adam_beta2}, {"adam_eps", adam_eps},
          {"seed", seed},             {"init_seed", init_seed},   {"split_seed", split_seed},
          {"selection_metric", "val_auc"}};
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

std::filesystem::path cnn_stem(const std::filesystem::path& path) {
  std::string s = path.string();
  for (const char* suffix : {".cnn.json", ".cnn.raw"}) {
    const std::string suf = suffix;
    if (s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0) {
      return s.substr(0, s.size() - suf.size());
    }
  }
  return path;
}

}  // namespace

void save_cnn(const CnnModel<float>& model, const std::filesystem::path& path) {
  const auto layout = parameter_layout(model.arch);
  if (layout.size() != model.params.size()) throw DataError("save_cnn: parameter count does not match arch");
  json tensors = json::array();
  std::vector<float> blob;
  for (std::size_t k = 0; k < layout.size(); ++k) {
    if (model.params[k].size() != layout[k].size()) throw DataError("save_cnn: tensor shape mismatch");
    tensors.push_back({{"name", layout[k].name}, {"shape", layout[k].dims}});
    blob.insert(blob.end(), model.params[k].data(), model.params[k].data() + model.params[k].size());
  }
  const json manifest = {{"format", "hsi-cnn/1"}, {"arch", model.arch.to_json()}, {"init_seed", model.init_seed},
                         {"dtype", "f32le"},      {"tensors", tensors}};
  const std::string stem = cnn_stem(path).string();
  std::ofstream out(stem + ".cnn.json", std::ios::binary);
  if (!out) throw DataError("cannot write " + stem + ".cnn.json");
  out << manifest.dump(2) << "\n";
  out.close();
  write_f32le(stem + ".cnn.raw", blob.data(), blob.size());
}

CnnModel<float> load_cnn(const std::filesystem::path& path) {
  const std::string stem = cnn_stem(path).string();
  std::ifstream in(stem + ".cnn.json");
  if (!in) throw DataError("cannot open " + stem + ".cnn.json");
  CnnModel<float> model;
  std::vector<TensorShape> layout;
  try {
    const json manifest = json::parse(in);
    if (manifest.at("format") != "hsi-cnn/1" || manifest.at("dtype") != "f32le") {
      throw DataError("cnn: unsupported model format");
    }
    model.arch = CnnArch::from_json(manifest.at("arch"));
    model.init_seed = manifest.at("init_seed").get<std::uint64_t>();
    layout = parameter_layout(model.arch);
    const json& tensors = manifest.at("tensors");
    if (tensors.size() != layout.size()) throw DataError("cnn: tensor list does not match arch");
    for (std::size_t k = 0; k < layout.size(); ++k) {
      if (tensors[k].at("name") != layout[k].name || tensors[k].at("shape").get<std::vector<Index>>() != layout[k].dims) {
        throw DataError("cnn: tensor " + layout[k].name + " has an unexpected name or shape");
      }
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed cnn manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("malformed cnn manifest: ") + e.what());
  }
  const auto blob = read_f32le(stem + ".cnn.raw");
  Index expected = 0;
  for (const auto& t : layout) expected += t.size();
  if (static_cast<Index>(blob.size()) != expected) {
    throw DataError("cnn: weight blob holds " + std::to_string(blob.size()) + " values, manifest expects " +
                    std::to_string(expected));
  }
  Index offset = 0;
  for (const auto& t : layout) {
    model.params.push_back(Eigen::Map<const Eigen::VectorXf>(blob.data() + offset, t.size()));
    offset += t.size();
  }
  for (const auto& p : model.params) {
    if (!p.allFinite()) throw DataError("cnn: non-finite weight");
  }
  return model;
}

#define HSI_INSTANTIATE_CNN(S)                                                                                      \
  template CnnModel<S> init_model<S>(const CnnArch&, std::uint64_t);                                                \
  template std::vector<RowMajorMatrix<S>> forward<S>(const CnnModel<S>&, std::span<const RowMajorMatrix<S>>);       \
  template double bce_loss<S>(std::span<const RowMajorMatrix<S>>, std::span<const LabelMask>,                       \
                              std::span<const LabelMask>);                                                          \
  template BackwardResult<S> backward<S>(const CnnModel<S>&, std::span<const RowMajorMatrix<S>>,                    \
                                         std::span<const LabelMask>, std::span<const LabelMask>);                   \
  template void adam_step<S>(CnnModel<S>&, const std::vector<Vector<S>>&, AdamState<S>&, const TrainConfig&);

HSI_INSTANTIATE_CNN(float)
HSI_INSTANTIATE_CNN(double)

#undef HSI_INSTANTIATE_CNN

}  // namespace hsi
