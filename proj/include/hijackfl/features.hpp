#pragma once

// 2-D PCA projection of feature-extractor activations for visualization.

#include <Eigen/Dense>

#include <cmath>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "hijackfl/errors.hpp"
#include "hijackfl/model.hpp"
#include "hijackfl/report.hpp"

namespace hijackfl::features {

struct FeatureGroup {
  std::string name;
  /// Pixel-space samples, [k x input_dim].
  Tensor samples;
};

struct FeaturePoint {
  std::string group;
  double x = 0.0, y = 0.0;
};

struct Projection {
  std::vector<FeaturePoint> points;
  Eigen::VectorXd mean;
  /// Columns are the first and second principal axes.
  Eigen::MatrixXd axes;
  double variance1 = 0.0, variance2 = 0.0;
};

/// Principal axes of the rows of `x`, each flipped so that its
/// largest-magnitude loading is positive.
inline Projection fit_pca2(const Eigen::MatrixXd& x) {
  if (x.rows() < 2) throw InvalidArgument("PCA needs at least two samples");
  Projection p;
  p.mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - p.mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const auto d = cov.rows();
  p.axes.resize(d, 2);
  const Eigen::Index take = std::min<Eigen::Index>(2, d);
  p.axes.setZero();
  for (Eigen::Index k = 0; k < take; ++k) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    p.axes.col(k) = v;
  }
  p.variance1 = std::max(0.0, eig.eigenvalues()(d - 1));
  p.variance2 = d > 1 ? std::max(0.0, eig.eigenvalues()(d - 2)) : 0.0;
  return p;
}

/// Features of every group projected onto the top two principal components
/// of the pooled features.
inline Projection export_features(const nn::Parameters& model, const std::vector<FeatureGroup>& groups) {
  if (groups.size() < 2) throw InvalidArgument("export_features: need at least two groups");
  std::vector<Tensor> feats;
  std::size_t total = 0;
  for (const auto& g : groups) {
    feats.push_back(g.samples.rows() ? nn::forward_features(model, g.samples) : Tensor::zeros({0, model.spec.feature_dim()}));
    total += g.samples.rows();
  }
  if (total < 2) throw InvalidArgument("export_features: need at least two samples");
  const auto dim = static_cast<Eigen::Index>(model.spec.feature_dim());
  Eigen::MatrixXd pooled(static_cast<Eigen::Index>(total), dim);
  Eigen::Index row = 0;
  for (const auto& f : feats)
    for (std::size_t r = 0; r < f.rows(); ++r, ++row)
      for (Eigen::Index c = 0; c < dim; ++c) pooled(row, c) = f.values[r * f.cols() + static_cast<std::size_t>(c)];
  Projection p = fit_pca2(pooled);
  const Eigen::MatrixXd proj = (pooled.rowwise() - p.mean.transpose()) * p.axes;
  row = 0;
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t r = 0; r < feats[g].rows(); ++r, ++row) p.points.push_back({groups[g].name, proj(row, 0), proj(row, 1)});
  return p;
}

inline void write_features_csv(std::ostream& os, const std::vector<FeaturePoint>& pts) {
  os << "group,x,y\n";
  for (const auto& p : pts) os << report::csv_escape(p.group) << "," << report::fmt(p.x) << "," << report::fmt(p.y) << "\n";
}

/// Mean 2-D position of one group's points.
inline std::pair<double, double> centroid(const std::vector<FeaturePoint>& pts, const std::string& group) {
  double x = 0, y = 0;
  std::size_t k = 0;
  for (const auto& p : pts)
    if (p.group == group) x += p.x, y += p.y, ++k;
  if (k == 0) throw InvalidArgument("centroid: no points in group " + group);
  return {x / static_cast<double>(k), y / static_cast<double>(k)};
}

inline std::vector<report::Series> scatter_series(const std::vector<FeaturePoint>& pts) {
  std::vector<report::Series> out;
  for (const auto& p : pts) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& s) { return s.name == p.group; });
    if (it == out.end()) {
      out.push_back({p.group, {}, {}});
      it = out.end() - 1;
    }
    it->x.push_back(p.x);
    it->y.push_back(p.y);
  }
  return out;
}

}  // namespace hijackfl::features
