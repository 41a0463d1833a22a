// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mnlm/align.hpp"

namespace mnlm {

struct ProjectedPoint {
  std::string lang;
  std::string token;
  double x = 0;
  double y = 0;
};

// Pools the first n_points non-UNK rows (most frequent words) of each space,
// mean-centers them and projects onto the two leading principal components.
// Each component's sign is fixed so that its largest-magnitude loading is positive.
inline std::vector<ProjectedPoint> project_pca(std::span<const EmbeddingSpace> spaces, std::size_t n_points = 1000) {
  if (spaces.empty()) throw std::invalid_argument("project: no embedding spaces");
  const auto dim = spaces[0].matrix.cols();
  std::vector<ProjectedPoint> points;
  for (const auto& s : spaces) {
    if (s.matrix.cols() != dim) throw std::invalid_argument("project: embedding dimensions differ");
    std::size_t taken = 0;
    for (std::size_t i = 0; i < s.size() && taken < n_points; ++i) {
      if (s.tokens[i] == kUnkToken) continue;
      points.push_back({s.lang, s.tokens[i], 0, 0});
      ++taken;
    }
  }
  if (points.size() < 2) throw std::invalid_argument("project: at least two points required");

  RowMatrix data(static_cast<Eigen::Index>(points.size()), dim);
  Eigen::Index r = 0;
  for (const auto& s : spaces) {
    std::size_t taken = 0;
    for (std::size_t i = 0; i < s.size() && taken < n_points; ++i) {
      if (s.tokens[i] == kUnkToken) continue;
      data.row(r++) = s.matrix.row(static_cast<Eigen::Index>(i));
      ++taken;
    }
  }
  const Eigen::RowVectorXd mean = data.colwise().mean();
  data.rowwise() -= mean;

  const Eigen::MatrixXd cov = data.transpose() * data;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // Eigenvalues ascend; take the last two columns.
  Eigen::MatrixXd basis(dim, 2);
  for (int c = 0; c < 2; ++c) {
    const Eigen::Index src = dim - 1 - c;
    Eigen::VectorXd v = src >= 0 ? Eigen::VectorXd(eig.eigenvectors().col(src)) : Eigen::VectorXd::Zero(dim);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    basis.col(c) = v;
  }
  const Eigen::MatrixXd coords = data * basis;
  for (std::size_t i = 0; i < points.size(); ++i) {
    points[i].x = coords(static_cast<Eigen::Index>(i), 0);
    points[i].y = coords(static_cast<Eigen::Index>(i), 1);
  }
  return points;
}

}  // namespace mnlm
