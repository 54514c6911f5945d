#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace chaosda::neural {

// Fully connected net with tanh hidden activations and a linear output
// layer. Weights are (out x in); biases are column vectors.
struct LayerParams {
  Eigen::MatrixXd w;
  Eigen::VectorXd b;
};

struct MlpParams {
  std::vector<LayerParams> layers;

  int input_dim() const { return static_cast<int>(layers.front().w.cols()); }
  int output_dim() const { return static_cast<int>(layers.back().w.rows()); }
  std::size_t parameter_count() const;
  std::vector<int> sizes() const;
};

// Shape-congruent with the MlpParams they were computed from.
struct Gradients {
  std::vector<LayerParams> layers;
};

struct AdamState {
  std::vector<LayerParams> m;
  std::vector<LayerParams> v;
  std::int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Same optimizer for flat vectors (the policy log-std).
struct AdamVecState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  std::int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Weights uniform in +-1/sqrt(fan_in), biases zero, deterministic per seed.
// Throws std::invalid_argument for fewer than two sizes or a non-positive
// size.
MlpParams mlp_init(const std::vector<int>& sizes, std::uint64_t seed);

Gradients zero_gradients_like(const MlpParams& p);
AdamState adam_init(const MlpParams& p, double lr = 1e-3);
AdamVecState adam_vec_init(Eigen::Index n, double lr = 1e-3);

// Throws std::invalid_argument on input dimension mismatch.
Eigen::VectorXd mlp_forward(const MlpParams& p, const Eigen::VectorXd& in);

// Batched forward over column-stacked inputs; trace keeps every activation
// (acts[0] = input, acts[k] = output of layer k-1) for the backward pass.
struct ForwardTrace {
  std::vector<Eigen::MatrixXd> acts;
};

Eigen::MatrixXd mlp_forward_batch(const MlpParams& p, const Eigen::MatrixXd& in,
                                  ForwardTrace* trace = nullptr);

// Exact reverse-mode gradient of <output_grad, mlp_forward(input)>.
Gradients mlp_backward(const MlpParams& p, const Eigen::VectorXd& input,
                       const Eigen::VectorXd& output_grad);

// Batched variant; gradients are summed over the batch columns.
Gradients mlp_backward_batch(const MlpParams& p, const ForwardTrace& trace,
                             const Eigen::MatrixXd& output_grads);

double global_norm(const Gradients& g);

// Scales all entries so the global L2 norm is at most max_norm. Norms within
// a 1e-9 relative band of max_norm count as already clipped, which makes the
// operation idempotent at the bit level.
Gradients clip_grad_norm(Gradients g, double max_norm);

void adam_step_inplace(MlpParams& params, const Gradients& grads,
                       AdamState& state);
std::pair<MlpParams, AdamState> adam_step(MlpParams params,
                                          const Gradients& grads,
                                          AdamState state);
void adam_vec_step_inplace(Eigen::VectorXd& params, const Eigen::VectorXd& grads,
                           AdamVecState& state);

// Flat binary checkpoint: magic, role tag byte, layer-size manifest,
// row-major little-endian float64 payload, then a trailing extras block.
inline constexpr char kRoleActor = 'A';
inline constexpr char kRoleCritic = 'C';

void save_checkpoint(const std::string& path, char role, const MlpParams& p,
                     const std::vector<double>& extras);

struct LoadedCheckpoint {
  char role = 0;
  MlpParams params;
  std::vector<double> extras;
};

// Throws std::runtime_error naming the defect (magic, role, sizes, length).
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace chaosda::neural
