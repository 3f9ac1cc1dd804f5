#pragma once

#include <Eigen/Dense>

#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace headlab {

using MatrixRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense n-d value: a shape plus row-major storage. Rank-2 tensors expose an
// Eigen matrix view; higher ranks are indexed through flat offsets by the
// operators that understand their layout (feature grids, pooled grids).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<Eigen::Index> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = Eigen::VectorXd::Zero(count(t.shape_));
    return t;
  }

  static Tensor of(std::vector<Eigen::Index> shape, Eigen::VectorXd data) {
    if (count(shape) != data.size())
      throw std::invalid_argument("tensor shape does not match value count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }

  static Tensor from_matrix(const MatrixRM& m) {
    Tensor t;
    t.shape_ = {m.rows(), m.cols()};
    t.data_ = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
    return t;
  }

  static Tensor scalar(double v) {
    Tensor t;
    t.shape_ = {1};
    t.data_ = Eigen::VectorXd::Constant(1, v);
    return t;
  }

  static Tensor row(std::initializer_list<double> vals) {
    Tensor t;
    t.shape_ = {1, static_cast<Eigen::Index>(vals.size())};
    t.data_.resize(static_cast<Eigen::Index>(vals.size()));
    Eigen::Index i = 0;
    for (double v : vals) t.data_[i++] = v;
    return t;
  }

  const std::vector<Eigen::Index>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Eigen::Index dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  Eigen::Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Eigen::VectorXd& flat() { return data_; }
  const Eigen::VectorXd& flat() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](Eigen::Index i) { return data_[i]; }
  double operator[](Eigen::Index i) const { return data_[i]; }

  // rank-2 element access
  double& at(Eigen::Index r, Eigen::Index c) {
    return data_[r * shape_[1] + c];
  }
  double at(Eigen::Index r, Eigen::Index c) const {
    return data_[r * shape_[1] + c];
  }

  Eigen::Map<MatrixRM> mat() {
    require_rank2();
    return {data_.data(), shape_[0], shape_[1]};
  }
  Eigen::Map<const MatrixRM> mat() const {
    require_rank2();
    return {data_.data(), shape_[0], shape_[1]};
  }

  double scalar_value() const {
    if (size() != 1) throw std::logic_error("tensor is not a scalar");
    return data_[0];
  }

  bool all_finite() const { return data_.allFinite(); }

  static Eigen::Index count(const std::vector<Eigen::Index>& shape) {
    Eigen::Index n = 1;
    for (Eigen::Index d : shape) {
      if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
      n *= d;
    }
    return n;
  }

 private:
  void require_rank2() const {
    if (shape_.size() != 2) throw std::logic_error("tensor is not rank 2");
  }

  std::vector<Eigen::Index> shape_;
  Eigen::VectorXd data_;
};

}  // namespace headlab
