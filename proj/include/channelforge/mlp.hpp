#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "channelforge/util.hpp"

namespace chforge {

// Fully connected ReLU network with a softmax cross-entropy head. Samples are
// columns. Templated on the scalar so gradients can be checked in double.
template <typename Scalar>
class MlpNet {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  MlpNet() = default;

  // He-normal weights, zero biases.
  MlpNet(std::vector<int> sizes, std::mt19937_64& rng) : sizes_(std::move(sizes)) {
    if (sizes_.size() < 2) throw std::invalid_argument("mlp needs at least an input and an output layer");
    for (int s : sizes_)
      if (s < 1) throw std::invalid_argument("mlp layer widths must be >= 1");
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      Mat w(sizes_[l + 1], sizes_[l]);
      const double sd = std::sqrt(2.0 / sizes_[l]);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(sd * normal(rng));
      weights_.push_back(std::move(w));
      biases_.push_back(Vec::Zero(sizes_[l + 1]));
    }
  }

  const std::vector<int>& sizes() const { return sizes_; }
  std::vector<Mat>& weights() { return weights_; }
  std::vector<Vec>& biases() { return biases_; }
  const std::vector<Mat>& weights() const { return weights_; }
  const std::vector<Vec>& biases() const { return biases_; }
  std::size_t num_layers() const { return weights_.size(); }

  Mat logits(const Mat& x) const {
    Mat a = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Mat z = (weights_[l] * a).colwise() + biases_[l];
      a = l + 1 < weights_.size() ? Mat(z.cwiseMax(Scalar(0))) : z;
    }
    return a;
  }

  std::vector<int> predict(const Mat& x) const {
    const Mat out = logits(x);
    std::vector<int> cls(out.cols());
    for (Eigen::Index j = 0; j < out.cols(); ++j) out.col(j).maxCoeff(&cls[j]);
    return cls;
  }

  // Mean cross-entropy over the batch; fills gradients shaped like the
  // parameters.
  Scalar loss_and_grad(const Mat& x, const std::vector<int>& labels, std::vector<Mat>& dw, std::vector<Vec>& db) const {
    const std::size_t layers = weights_.size();
    std::vector<Mat> acts;
    acts.reserve(layers + 1);
    acts.push_back(x);
    for (std::size_t l = 0; l < layers; ++l) {
      Mat z = (weights_[l] * acts.back()).colwise() + biases_[l];
      acts.push_back(l + 1 < layers ? Mat(z.cwiseMax(Scalar(0))) : z);
    }
    Mat delta = acts.back();
    const auto batch = static_cast<Scalar>(x.cols());
    Scalar loss = 0;
    for (Eigen::Index j = 0; j < delta.cols(); ++j) {
      auto col = delta.col(j);
      const Scalar mx = col.maxCoeff();
      col = (col.array() - mx).exp();
      const Scalar sum = col.sum();
      col /= sum;
      loss -= std::log(std::max(col(labels[j]), std::numeric_limits<Scalar>::min()));
      col(labels[j]) -= Scalar(1);
    }
    delta /= batch;
    dw.resize(layers);
    db.resize(layers);
    for (std::size_t l = layers; l-- > 0;) {
      dw[l] = delta * acts[l].transpose();
      db[l] = delta.rowwise().sum();
      if (l > 0) {
        Mat back = weights_[l].transpose() * delta;
        delta = back.cwiseProduct((acts[l].array() > Scalar(0)).template cast<Scalar>().matrix());
      }
    }
    return loss / batch;
  }

 private:
  static double normal(std::mt19937_64& rng) {
    const double u1 = 1.0 - unit_uniform(rng);
    const double u2 = unit_uniform(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::vector<int> sizes_;
  std::vector<Mat> weights_;
  std::vector<Vec> biases_;
};

// Adam with the usual bias correction.
template <typename Scalar>
class AdamOptimizer {
 public:
  using Mat = typename MlpNet<Scalar>::Mat;
  using Vec = typename MlpNet<Scalar>::Vec;

  AdamOptimizer(const MlpNet<Scalar>& net, double lr) : lr_(lr) {
    for (const auto& w : net.weights()) {
      mw_.push_back(Mat::Zero(w.rows(), w.cols()));
      vw_.push_back(Mat::Zero(w.rows(), w.cols()));
    }
    for (const auto& b : net.biases()) {
      mb_.push_back(Vec::Zero(b.size()));
      vb_.push_back(Vec::Zero(b.size()));
    }
  }

  void set_learning_rate(double lr) { lr_ = lr; }

  void step(MlpNet<Scalar>& net, const std::vector<Mat>& dw, const std::vector<Vec>& db) {
    ++t_;
    const Scalar c1 = Scalar(1.0 / (1.0 - std::pow(beta1, t_)));
    const Scalar c2 = Scalar(1.0 / (1.0 - std::pow(beta2, t_)));
    const auto b1 = Scalar(beta1), b2 = Scalar(beta2), lr = Scalar(lr_), eps = Scalar(1e-8);
    for (std::size_t l = 0; l < dw.size(); ++l) {
      mw_[l] = b1 * mw_[l] + (1 - b1) * dw[l];
      vw_[l] = b2 * vw_[l] + (1 - b2) * dw[l].cwiseProduct(dw[l]);
      net.weights()[l].array() -= lr * (mw_[l].array() * c1) / ((vw_[l].array() * c2).sqrt() + eps);
      mb_[l] = b1 * mb_[l] + (1 - b1) * db[l];
      vb_[l] = b2 * vb_[l] + (1 - b2) * db[l].cwiseProduct(db[l]);
      net.biases()[l].array() -= lr * (mb_[l].array() * c1) / ((vb_[l].array() * c2).sqrt() + eps);
    }
  }

 private:
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  double lr_;
  int t_ = 0;
  std::vector<Mat> mw_, vw_;
  std::vector<Vec> mb_, vb_;
};

}  // namespace chforge
