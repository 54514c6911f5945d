#include "chaosda/neural.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "chaosda/rng.hpp"

namespace chaosda::neural {

std::size_t MlpParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers)
    n += static_cast<std::size_t>(l.w.size()) + static_cast<std::size_t>(l.b.size());
  return n;
}

std::vector<int> MlpParams::sizes() const {
  std::vector<int> s;
  s.push_back(input_dim());
  for (const auto& l : layers) s.push_back(static_cast<int>(l.w.rows()));
  return s;
}

MlpParams mlp_init(const std::vector<int>& sizes, std::uint64_t seed) {
  if (sizes.size() < 2)
    throw std::invalid_argument("mlp_init: need at least input and output sizes");
  for (int s : sizes)
    if (s <= 0) throw std::invalid_argument("mlp_init: sizes must be positive");

  Rng rng(seed);
  MlpParams p;
  p.layers.resize(sizes.size() - 1);
  for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
    const int in = sizes[k], out = sizes[k + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    LayerParams& l = p.layers[k];
    l.w.resize(out, in);
    for (int r = 0; r < out; ++r)  // row-major draw order, fixed by contract
      for (int c = 0; c < in; ++c) l.w(r, c) = rng.uniform(-bound, bound);
    l.b = Eigen::VectorXd::Zero(out);
  }
  return p;
}

Gradients zero_gradients_like(const MlpParams& p) {
  Gradients g;
  g.layers.resize(p.layers.size());
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    g.layers[k].w = Eigen::MatrixXd::Zero(p.layers[k].w.rows(), p.layers[k].w.cols());
    g.layers[k].b = Eigen::VectorXd::Zero(p.layers[k].b.size());
  }
  return g;
}

AdamState adam_init(const MlpParams& p, double lr) {
  AdamState s;
  s.lr = lr;
  const Gradients z = zero_gradients_like(p);
  s.m = z.layers;
  s.v = z.layers;
  return s;
}

AdamVecState adam_vec_init(Eigen::Index n, double lr) {
  AdamVecState s;
  s.lr = lr;
  s.m = Eigen::VectorXd::Zero(n);
  s.v = Eigen::VectorXd::Zero(n);
  return s;
}

Eigen::VectorXd mlp_forward(const MlpParams& p, const Eigen::VectorXd& in) {
  if (in.size() != p.layers.front().w.cols())
    throw std::invalid_argument("mlp_forward: input dimension mismatch");
  Eigen::VectorXd a = in;
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    Eigen::VectorXd z = p.layers[k].w * a + p.layers[k].b;
    if (k + 1 < p.layers.size())
      a = z.array().tanh().matrix();
    else
      a = std::move(z);
  }
  return a;
}

Eigen::MatrixXd mlp_forward_batch(const MlpParams& p, const Eigen::MatrixXd& in,
                                  ForwardTrace* trace) {
  if (in.rows() != p.layers.front().w.cols())
    throw std::invalid_argument("mlp_forward_batch: input dimension mismatch");
  if (trace) {
    trace->acts.clear();
    trace->acts.reserve(p.layers.size() + 1);
    trace->acts.push_back(in);
  }
  Eigen::MatrixXd a = in;
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    Eigen::MatrixXd z = (p.layers[k].w * a).colwise() + p.layers[k].b;
    if (k + 1 < p.layers.size())
      a = z.array().tanh().matrix();
    else
      a = std::move(z);
    if (trace) trace->acts.push_back(a);
  }
  return a;
}

Gradients mlp_backward_batch(const MlpParams& p, const ForwardTrace& trace,
                             const Eigen::MatrixXd& output_grads) {
  const auto L = p.layers.size();
  if (trace.acts.size() != L + 1)
    throw std::invalid_argument("mlp_backward_batch: trace does not match params");
  Gradients g;
  g.layers.resize(L);
  // delta holds dL/d(activation of layer k) entering iteration k
  Eigen::MatrixXd delta = output_grads;
  for (std::size_t k = L; k-- > 0;) {
    if (k + 1 < L)  // tanh layer: fold in the activation derivative
      delta = (delta.array() * (1.0 - trace.acts[k + 1].array().square())).matrix();
    g.layers[k].w.noalias() = delta * trace.acts[k].transpose();
    g.layers[k].b = delta.rowwise().sum();
    if (k > 0) delta = p.layers[k].w.transpose() * delta;
  }
  return g;
}

Gradients mlp_backward(const MlpParams& p, const Eigen::VectorXd& input,
                       const Eigen::VectorXd& output_grad) {
  if (output_grad.size() != p.layers.back().w.rows())
    throw std::invalid_argument("mlp_backward: output_grad dimension mismatch");
  ForwardTrace trace;
  mlp_forward_batch(p, input, &trace);
  return mlp_backward_batch(p, trace, output_grad);
}

double global_norm(const Gradients& g) {
  double sq = 0.0;
  for (const auto& l : g.layers) sq += l.w.squaredNorm() + l.b.squaredNorm();
  return std::sqrt(sq);
}

Gradients clip_grad_norm(Gradients g, double max_norm) {
  if (!(max_norm > 0.0))
    throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
  const double norm = global_norm(g);
  if (norm <= max_norm * (1.0 + 1e-9)) return g;
  const double scale = max_norm / norm;
  for (auto& l : g.layers) {
    l.w *= scale;
    l.b *= scale;
  }
  return g;
}

namespace {

template <class Mat>
void adam_update(Mat& p, const Mat& grad, Mat& m, Mat& v, double lr, double b1,
                 double b2, double eps, double c1, double c2) {
  m = b1 * m + (1.0 - b1) * grad;
  v = (b2 * v.array() + (1.0 - b2) * grad.array().square()).matrix();
  p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

}  // namespace

void adam_step_inplace(MlpParams& params, const Gradients& grads,
                       AdamState& state) {
  if (grads.layers.size() != params.layers.size())
    throw std::invalid_argument("adam_step: gradient shape mismatch");
  for (std::size_t k = 0; k < params.layers.size(); ++k)
    if (grads.layers[k].w.rows() != params.layers[k].w.rows() ||
        grads.layers[k].w.cols() != params.layers[k].w.cols() ||
        grads.layers[k].b.size() != params.layers[k].b.size())
      throw std::invalid_argument("adam_step: gradient shape mismatch");

  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    adam_update(params.layers[k].w, grads.layers[k].w, state.m[k].w,
                state.v[k].w, state.lr, state.beta1, state.beta2, state.eps, c1, c2);
    adam_update(params.layers[k].b, grads.layers[k].b, state.m[k].b,
                state.v[k].b, state.lr, state.beta1, state.beta2, state.eps, c1, c2);
  }
}

std::pair<MlpParams, AdamState> adam_step(MlpParams params, const Gradients& grads,
                                          AdamState state) {
  adam_step_inplace(params, grads, state);
  return {std::move(params), std::move(state)};
}

void adam_vec_step_inplace(Eigen::VectorXd& params, const Eigen::VectorXd& grads,
                           AdamVecState& state) {
  if (grads.size() != params.size())
    throw std::invalid_argument("adam_vec_step: gradient shape mismatch");
  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  adam_update(params, grads, state.m, state.v, state.lr, state.beta1, state.beta2,
              state.eps, c1, c2);
}

namespace {

constexpr char kMagic[8] = {'C', 'D', 'A', 'N', 'E', 'T', '0', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw std::runtime_error("checkpoint: file truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return std::bit_cast<double>(v);
  }
};

}  // namespace

void save_checkpoint(const std::string& path, char role, const MlpParams& p,
                     const std::vector<double>& extras) {
  if (role != kRoleActor && role != kRoleCritic)
    throw std::invalid_argument("save_checkpoint: unknown role tag");
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  out.push_back(role);
  out.append(3, '\0');
  const std::vector<int> sizes = p.sizes();
  put_u32(out, static_cast<std::uint32_t>(sizes.size()));
  for (int s : sizes) put_u32(out, static_cast<std::uint32_t>(s));
  put_u32(out, static_cast<std::uint32_t>(extras.size()));
  for (const auto& l : p.layers) {
    for (Eigen::Index r = 0; r < l.w.rows(); ++r)
      for (Eigen::Index c = 0; c < l.w.cols(); ++c) put_f64(out, l.w(r, c));
    for (Eigen::Index i = 0; i < l.b.size(); ++i) put_f64(out, l.b(i));
  }
  for (double e : extras) put_f64(out, e);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());

  Reader r{buf};
  r.need(sizeof(kMagic));
  if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic header");
  r.pos = sizeof(kMagic);
  r.need(4);
  const char role = buf[r.pos];
  if (role != kRoleActor && role != kRoleCritic)
    throw std::runtime_error("checkpoint: unknown role tag");
  r.pos += 4;

  const std::uint32_t n_sizes = r.u32();
  if (n_sizes < 2 || n_sizes > 64)
    throw std::runtime_error("checkpoint: implausible layer manifest");
  std::vector<int> sizes(n_sizes);
  for (auto& s : sizes) {
    const std::uint32_t v = r.u32();
    if (v == 0 || v > (1u << 20))
      throw std::runtime_error("checkpoint: implausible layer size");
    s = static_cast<int>(v);
  }
  const std::uint32_t n_extra = r.u32();

  LoadedCheckpoint out;
  out.role = role;
  out.params.layers.resize(n_sizes - 1);
  for (std::uint32_t k = 0; k + 1 < n_sizes; ++k) {
    LayerParams& l = out.params.layers[k];
    l.w.resize(sizes[k + 1], sizes[k]);
    for (Eigen::Index rr = 0; rr < l.w.rows(); ++rr)
      for (Eigen::Index c = 0; c < l.w.cols(); ++c) l.w(rr, c) = r.f64();
    l.b.resize(sizes[k + 1]);
    for (Eigen::Index i = 0; i < l.b.size(); ++i) l.b(i) = r.f64();
  }
  out.extras.resize(n_extra);
  for (auto& e : out.extras) e = r.f64();
  if (r.pos != buf.size())
    throw std::runtime_error("checkpoint: trailing bytes after payload");
  return out;
}

}  // namespace chaosda::neural
