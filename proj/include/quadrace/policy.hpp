#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "quadrace/env.hpp"
#include "quadrace/rng.hpp"

namespace quadrace {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

// One dense layer inside the flat parameter vector. The weight block is
// stored row-major (rows = outputs), followed by the bias.
struct DenseLayout {
  Eigen::Index in = 0;
  Eigen::Index out = 0;
  Eigen::Index offset = 0;

  Eigen::Index weight_size() const { return in * out; }
  Eigen::Index bias_offset() const { return offset + weight_size(); }
  Eigen::Index end() const { return bias_offset() + out; }
};

// Actor-critic parameters: two independent ReLU trunks (actor, critic) with
// the given hidden widths, a linear 4-d action-mean head, a state-independent
// log-std vector and a scalar value head. All values live in one flat vector
// in the order
//   actor layers..., actor head, log_std, critic layers..., critic head
// which is also the checkpoint blob order.
class PolicyParams {
 public:
  explicit PolicyParams(std::vector<int> hidden = {64, 64, 64});

  const std::vector<int>& hidden() const { return hidden_; }
  Eigen::Index size() const { return values_.size(); }

  Eigen::VectorXd& values() { return values_; }
  const Eigen::VectorXd& values() const { return values_; }

  const std::vector<DenseLayout>& actor() const { return actor_; }
  const std::vector<DenseLayout>& critic() const { return critic_; }
  Eigen::Index log_std_offset() const { return log_std_offset_; }

  Eigen::Map<RowMajorMatrix> weight(const DenseLayout& l) {
    return {values_.data() + l.offset, l.out, l.in};
  }
  Eigen::Map<const RowMajorMatrix> weight(const DenseLayout& l) const {
    return {values_.data() + l.offset, l.out, l.in};
  }
  Eigen::Map<Eigen::VectorXd> bias(const DenseLayout& l) {
    return {values_.data() + l.bias_offset(), l.out};
  }
  Eigen::Map<const Eigen::VectorXd> bias(const DenseLayout& l) const {
    return {values_.data() + l.bias_offset(), l.out};
  }
  Eigen::Map<Eigen::Vector4d> log_std() { return Eigen::Map<Eigen::Vector4d>(values_.data() + log_std_offset_); }
  Eigen::Map<const Eigen::Vector4d> log_std() const {
    return Eigen::Map<const Eigen::Vector4d>(values_.data() + log_std_offset_);
  }

  // Zero vector with the same layout, used for gradients.
  PolicyParams zeros_like() const;
  void clamp_log_std();

  bool operator==(const PolicyParams& o) const {
    return hidden_ == o.hidden_ && values_ == o.values_;
  }

 private:
  std::vector<int> hidden_;
  std::vector<DenseLayout> actor_;
  std::vector<DenseLayout> critic_;
  Eigen::Index log_std_offset_ = 0;
  Eigen::VectorXd values_;
};

// Orthogonal initialization: hidden gain sqrt(2), action head 0.01, value
// head 1, zero biases, log_std 0.
PolicyParams init_policy(Rng& rng, std::vector<int> hidden = {64, 64, 64});

struct PolicyOutput {
  Vec4 mean;
  double value = 0.0;
};

PolicyOutput forward(const PolicyParams& params, const Observation& obs);

// Batched forward pass; observations are columns. Keeps the post-activation
// outputs of every hidden layer for backpropagation.
struct ForwardCache {
  std::vector<Eigen::MatrixXd> actor_hidden;
  std::vector<Eigen::MatrixXd> critic_hidden;
  Eigen::MatrixXd mean;         // 4 x B
  Eigen::RowVectorXd value;     // 1 x B
};
ForwardCache forward_batch(const PolicyParams& params, const Eigen::MatrixXd& obs);

// Single-trunk passes: action means (4 x B) and values (1 x B).
Eigen::MatrixXd action_mean_batch(const PolicyParams& params, const Eigen::MatrixXd& obs);
Eigen::RowVectorXd value_batch(const PolicyParams& params, const Eigen::MatrixXd& obs);

struct ActionSample {
  MotorCommand command;  // clipped to [0, 1]
  Vec4 raw;              // unclipped Gaussian draw
  double log_prob = 0.0;
};

ActionSample sample_action(const PolicyParams& params, const Observation& obs, Rng& rng);
// Samples given a precomputed mean (shares the batched forward pass).
ActionSample sample_from_mean(const Vec4& mean, const Vec4& log_std, Rng& rng);

struct LogProbEntropy {
  double log_prob = 0.0;
  double entropy = 0.0;
};
LogProbEntropy log_prob_and_entropy(const PolicyParams& params, const Observation& obs,
                                    const Vec4& raw_action);
double gaussian_log_prob(const Vec4& mean, const Vec4& log_std, const Vec4& x);
double gaussian_entropy(const Vec4& log_std);

// PPO objective on one minibatch (columns are samples):
//   L = -mean(min(r A, clip(r, 1-eps, 1+eps) A)) + c_v mean((V - R)^2)
//       - c_e mean(entropy)
struct LossSpec {
  double clip_range = 0.2;
  double value_coef = 0.5;
  double entropy_coef = 0.0;
};

struct Minibatch {
  Eigen::MatrixXd obs;            // 20 x B
  Eigen::MatrixXd actions;        // 4 x B, unclipped
  Eigen::VectorXd old_log_prob;   // B
  Eigen::VectorXd advantages;     // B
  Eigen::VectorXd returns;        // B
};

struct LossValue {
  double total = 0.0;
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
};

// Evaluates the loss and, if grad is non-null, adds its analytic gradient to it
// (grad must share the layout of params).
LossValue ppo_loss(const PolicyParams& params, const Minibatch& mb, const LossSpec& spec,
                   PolicyParams* grad = nullptr);

// Checkpoint: <stem>.json manifest plus <stem>.bin holding every parameter
// as a little-endian float32 in flat-vector order.
struct CheckpointMeta {
  std::int64_t training_steps = 0;
  nlohmann::json hyperparameters = nlohmann::json::object();
};
void save_checkpoint(const PolicyParams& params, const std::filesystem::path& stem,
                     const CheckpointMeta& meta = {});
PolicyParams load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

}  // namespace quadrace
