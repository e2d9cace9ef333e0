#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "nsde/data.hpp"
#include "nsde/model.hpp"
#include "nsde/parallel.hpp"
#include "nsde/random.hpp"

namespace nsde {

enum class OptimizerKind { sgd_momentum, adam };

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd_momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
  if (s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + std::string(s) + "'");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double lr = 0.05;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int epochs = 200;
  std::size_t batch_size = 64;
  std::size_t k_paths = 4;

  void validate() const {
    if (!(lr >= 0.0)) throw std::invalid_argument("OptimizerConfig: lr must be >= 0");
    if (epochs < 0 || batch_size == 0 || k_paths == 0) throw std::invalid_argument("OptimizerConfig: bad loop sizes");
  }
};

/// In-place update rule on a flat parameter vector.
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, Eigen::Index n)
      : cfg_(cfg), first_(Eigen::VectorXd::Zero(n)), second_(Eigen::VectorXd::Zero(n)) {}

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    ++t_;
    if (cfg_.kind == OptimizerKind::sgd_momentum) {
      first_ = cfg_.momentum * first_ + grad;
      params -= cfg_.lr * first_;
      return;
    }
    first_ = cfg_.beta1 * first_ + (1.0 - cfg_.beta1) * grad;
    second_ = cfg_.beta2 * second_ + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    params.array() -= cfg_.lr * (first_.array() / c1) / ((second_.array() / c2).sqrt() + cfg_.eps);
  }

 private:
  OptimizerConfig cfg_;
  Eigen::VectorXd first_, second_;
  long long t_ = 0;
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // of the stochastic training passes
};

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(int epoch)
      : std::runtime_error("training diverged (non-finite loss) in epoch " + std::to_string(epoch)), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

struct TrainResult {
  std::vector<EpochStats> history;
  std::size_t skipped_samples = 0;
};

/// Mini-batch training with pathwise gradients. Epoch e shuffles with
/// stream.child(e); batch b draws its paths from stream.child(e).child(b + 1).
inline TrainResult train(ClassifierModel& model, const Dataset& data, const OptimizerConfig& opt,
                         const RandomStream& stream, Exec exec = {}) {
  opt.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (data.input_dim() != model.input_dim()) throw std::invalid_argument("train: input dimension mismatch");
  const auto xs = data.samples();
  Eigen::VectorXd params = model.pack();
  Optimizer optimizer(opt, params.size());
  TrainResult result;
  std::vector<std::size_t> order(data.size());
  std::vector<Eigen::VectorXd> batch_x;
  std::vector<int> batch_y;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    const RandomStream epoch_stream = stream.child(static_cast<std::uint64_t>(epoch));
    std::iota(order.begin(), order.end(), std::size_t{0});
    RandomStream shuffler = epoch_stream.child(0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffler.bits() % i]);

    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size, ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + opt.batch_size);
      batch_x.clear();
      batch_y.clear();
      for (std::size_t i = start; i < stop; ++i) {
        batch_x.push_back(xs[order[i]]);
        batch_y.push_back(data.labels[order[i]]);
      }
      const RandomStream batch_stream = epoch_stream.child(batch_index + 1);
      ModelGradient g;
      try {
        g = model_gradient(model, batch_x, batch_y, opt.k_paths, batch_stream, exec);
      } catch (const NumericOverflow&) {
        throw TrainingDiverged(epoch);  // every sample of the batch overflowed
      }
      result.skipped_samples += g.n_skipped;
      if (!std::isfinite(g.loss_mean) || !g.flat.allFinite()) throw TrainingDiverged(epoch);
      loss_sum += g.loss_mean * static_cast<double>(stop - start - g.n_skipped);
      // accuracy of one fresh pass per sample, keyed apart from the gradient paths
      for (std::size_t i = 0; i < batch_x.size(); ++i) {
        try {
          const auto logits = forward(model, batch_x[i], batch_stream.child(1u << 20).child(i));
          correct += argmax(logits) == batch_y[i] ? 1u : 0u;
        } catch (const NumericOverflow&) {
        }
      }
      seen += stop - start;
      optimizer.step(params, g.flat);
      model.unpack(params);
    }
    const double mean_loss = loss_sum / static_cast<double>(seen);
    if (!std::isfinite(mean_loss)) throw TrainingDiverged(epoch);
    result.history.push_back({epoch, mean_loss, static_cast<double>(correct) / static_cast<double>(seen)});
  }
  return result;
}

}  // namespace nsde
