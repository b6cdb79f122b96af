#include "umic/localize.hpp"

#include <Eigen/QR>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <complex>
#include <sstream>

#include "umic/error.hpp"
#include "umic/fft.hpp"

namespace umic {

namespace {

constexpr double kStopStep = 1e-6;  // m
constexpr int kMaxIterations = 50;
constexpr int kMaxGrowingSteps = 5;

struct Array {
  Vec3 ref;
  std::vector<Vec3> nodes;  // one per used entry
  std::vector<double> tau;
  std::vector<double> weight;
};

Array gather(const TdoaSet& tdoa, const std::map<NodeId, Vec3>& positions) {
  auto lookup = [&](NodeId id) {
    const auto it = positions.find(id);
    if (it == positions.end()) throw ParameterError("localize: no position for node " + std::to_string(id));
    if (!it->second.allFinite()) throw ParameterError("localize: position of node " + std::to_string(id) + " not finite");
    return it->second;
  };
  Array a;
  a.ref = lookup(tdoa.reference);
  for (const auto& e : tdoa.entries) {
    if (e.flagged || !(e.confidence > 0.0)) continue;
    if (e.node == tdoa.reference) throw ParameterError("localize: entry for the reference node");
    a.nodes.push_back(lookup(e.node));
    a.tau.push_back(e.delay);
    a.weight.push_back(e.confidence);
  }
  return a;
}

Eigen::VectorXd residuals(const Array& a, double c, const Vec3& x) {
  Eigen::VectorXd r(static_cast<Eigen::Index>(a.nodes.size()));
  const double dref = (x - a.ref).norm();
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    r(static_cast<Eigen::Index>(i)) = ((x - a.nodes[i]).norm() - dref) / c - a.tau[i];
  }
  return r;
}

Eigen::MatrixXd jacobian(const Array& a, double c, const Vec3& x) {
  Eigen::MatrixXd j(static_cast<Eigen::Index>(a.nodes.size()), 3);
  const Vec3 uref = (x - a.ref).normalized();
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    const Vec3 u = (x - a.nodes[i]).normalized();
    j.row(static_cast<Eigen::Index>(i)) = ((u - uref) / c).transpose();
  }
  return j;
}

void check_speed(double c) {
  if (!(c > 0.0) || !std::isfinite(c)) throw ParameterError("localize: speed of sound must be positive");
}

}  // namespace

TdoaSet estimate_tdoa(const std::map<NodeId, PcmStream>& streams, NodeId reference, const Band& band,
                      std::optional<double> max_delay) {
  if (streams.size() < 2) throw ParameterError("estimate_tdoa: need at least two streams");
  const auto ref_it = streams.find(reference);
  if (ref_it == streams.end()) throw ParameterError("estimate_tdoa: reference stream missing");
  const double fs = ref_it->second.sample_rate;
  std::size_t n = ref_it->second.size();
  for (const auto& [id, s] : streams) {
    if (s.sample_rate != fs) throw ParameterError("estimate_tdoa: streams differ in sample rate");
    n = std::min(n, s.size());
  }
  if (n < 2) throw ParameterError("estimate_tdoa: streams shorter than two samples");
  if (!(band.low >= 0.0) || !(band.high > band.low)) throw ParameterError("estimate_tdoa: empty band");
  if (max_delay && !(*max_delay >= 0.0)) throw ParameterError("estimate_tdoa: negative max_delay");

  const std::size_t nfft = fast_fft_size(2 * n);
  const auto fft = real_fft(nfft);
  const std::size_t bins = fft->bins();
  std::vector<bool> in_band(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    const double f = static_cast<double>(k) * fs / static_cast<double>(nfft);
    in_band[k] = f >= band.low && f <= band.high;
  }

  std::vector<std::complex<double>> xr, xi;
  fft->forward(std::span<const double>(ref_it->second.samples.data(), n), xr);
  const auto max_lag = static_cast<std::ptrdiff_t>(
      std::min<double>(static_cast<double>(n - 1), max_delay ? std::floor(*max_delay * fs) : static_cast<double>(n - 1)));

  TdoaSet out;
  out.reference = reference;
  std::vector<std::complex<double>> g(bins);
  std::vector<double> r;
  for (const auto& [id, s] : streams) {
    if (id == reference) continue;
    fft->forward(std::span<const double>(s.samples.data(), n), xi);
    double peak_max = 0.0;
    for (std::size_t k = 0; k < bins; ++k) peak_max = std::max(peak_max, std::abs(xi[k] * std::conj(xr[k])));
    // Phase transform: unit magnitude on every usable in-band bin.
    double total = 0.0;
    for (std::size_t k = 0; k < bins; ++k) {
      const auto p = xi[k] * std::conj(xr[k]);
      const double m = std::abs(p);
      if (in_band[k] && m > 1e-12 * peak_max && m > 0.0) {
        g[k] = p / m;
        total += (k == 0 || 2 * k == nfft) ? 1.0 : 2.0;
      } else {
        g[k] = 0.0;
      }
    }
    TdoaEntry e;
    e.node = id;
    if (total > 0.0) {
      fft->inverse(g, r);
      auto at = [&](std::ptrdiff_t lag) {
        return r[static_cast<std::size_t>(lag >= 0 ? lag : static_cast<std::ptrdiff_t>(nfft) + lag)];
      };
      std::ptrdiff_t best = 0;
      for (std::ptrdiff_t lag = -max_lag; lag <= max_lag; ++lag) {
        const double v = at(lag);
        if (v > at(best) || (v == at(best) && std::abs(lag) < std::abs(best))) best = lag;
      }
      double frac = 0.0;
      if (best > -max_lag && best < max_lag) {
        const double ym = at(best - 1), y0 = at(best), yp = at(best + 1);
        const double den = ym - 2.0 * y0 + yp;
        if (den < 0.0) frac = std::clamp(0.5 * (ym - yp) / den, -0.5, 0.5);
      }
      e.delay = (static_cast<double>(best) + frac) / fs;
      e.confidence = std::clamp(at(best) / total, 0.0, 1.0);
    }
    e.flagged = e.confidence < kMinTdoaConfidence;
    out.entries.push_back(e);
  }
  return out;
}

TdoaSet correct_tdoa(const TdoaSet& tdoa, const std::map<NodeId, AlignmentInfo>& alignment, double t,
                     double sample_rate) {
  if (!(sample_rate > 0.0)) throw ParameterError("correct_tdoa: sample rate must be positive");
  auto residual = [&](NodeId id) {
    const auto it = alignment.find(id);
    return it == alignment.end() ? 0.0 : it->second.residual_at(t, sample_rate) / sample_rate;
  };
  TdoaSet out = tdoa;
  const double ref = residual(tdoa.reference);
  for (auto& e : out.entries) e.delay -= residual(e.node) - ref;
  return out;
}

Eigen::VectorXd tdoa_residuals(const TdoaSet& tdoa, const std::map<NodeId, Vec3>& positions, double c,
                               const Vec3& x) {
  check_speed(c);
  return residuals(gather(tdoa, positions), c, x);
}

Eigen::MatrixXd tdoa_jacobian(const TdoaSet& tdoa, const std::map<NodeId, Vec3>& positions, double c,
                              const Vec3& x) {
  check_speed(c);
  return jacobian(gather(tdoa, positions), c, x);
}

SourceFix multilaterate(const TdoaSet& tdoa, const std::map<NodeId, Vec3>& positions, double c,
                        std::optional<Vec3> initial) {
  check_speed(c);
  Array a = gather(tdoa, positions);
  const std::size_t m = a.nodes.size();
  if (m < 3) throw ParameterError("multilaterate: need at least three usable TDOA entries, have " + std::to_string(m));
  if (initial && !initial->allFinite()) throw ParameterError("multilaterate: initial point not finite");

  // Solve relative to the reference node, so translating everything leaves
  // the iteration unchanged.
  const Vec3 origin = a.ref;
  for (auto& p : a.nodes) p -= origin;
  a.ref = Vec3::Zero();

  Eigen::MatrixXd pts(static_cast<Eigen::Index>(m + 1), 3);
  pts.row(0) = a.ref.transpose();
  for (std::size_t i = 0; i < m; ++i) pts.row(static_cast<Eigen::Index>(i + 1)) = a.nodes[i].transpose();
  const Eigen::RowVector3d centroid = pts.colwise().mean();
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(pts.rowwise() - centroid);
  const auto sv = svd.singularValues();
  if (!(sv(1) > 1e-9 * std::max(sv(0), 1e-300))) throw RankDeficiencyError("multilaterate: node positions are collinear");

  Eigen::VectorXd sw(static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < m; ++i) sw(static_cast<Eigen::Index>(i)) = std::sqrt(a.weight[i]);

  SourceFix fix;
  Vec3 x = initial ? Vec3(*initial - origin) : Vec3(centroid.transpose());
  fix.path.push_back(initial ? *initial : Vec3(x + origin));
  std::vector<double> trace;
  int growing = 0;
  for (int it = 1; it <= kMaxIterations; ++it) {
    const Eigen::MatrixXd j = sw.asDiagonal() * jacobian(a, c, x);
    const Eigen::VectorXd r = sw.asDiagonal() * residuals(a, c, x);
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(j);
    if (qr.rank() < 3) {
      // Rank lost after moving is the iterate running off, not the array.
      const std::string msg = "multilaterate: Jacobian rank " + std::to_string(qr.rank()) + " < 3";
      if (it == 1) throw RankDeficiencyError(msg);
      throw ConvergenceError(msg + " at iteration " + std::to_string(it), trace);
    }
    Vec3 step = qr.solve(-r);
    if (!step.allFinite()) throw ConvergenceError("multilaterate: non-finite step", trace);
    // Backtrack while the full step raises the weighted cost.
    const double cost = r.squaredNorm();
    for (int k = 0; k < 30 && (sw.asDiagonal() * residuals(a, c, x + step)).squaredNorm() > cost; ++k) step *= 0.5;
    x += step;
    fix.iterations = it;
    fix.path.push_back(x + origin);
    const double norm = step.norm();
    growing = !trace.empty() && norm > trace.back() ? growing + 1 : 0;
    trace.push_back(norm);
    if (growing >= kMaxGrowingSteps) {
      std::ostringstream msg;
      msg << "multilaterate: diverging, step norms";
      for (double s : trace) msg << ' ' << s;
      throw ConvergenceError(msg.str(), trace);
    }
    if (norm < kStopStep) break;
  }
  fix.position = x + origin;
  const Eigen::VectorXd r = residuals(a, c, x);
  fix.rms_residual = std::sqrt(r.squaredNorm() / static_cast<double>(m));
  return fix;
}

double dilution_of_precision(const TdoaSet& tdoa, const std::map<NodeId, Vec3>& positions, double c,
                             const Vec3& source) {
  const Eigen::MatrixXd j = tdoa_jacobian(tdoa, positions, c, source);
  if (j.rows() < 3) throw ParameterError("dilution_of_precision: need at least three entries");
  const Eigen::Matrix3d info = j.transpose() * j;
  const Eigen::ColPivHouseholderQR<Eigen::Matrix3d> qr(info);
  if (qr.rank() < 3) throw RankDeficiencyError("dilution_of_precision: singular geometry");
  return std::sqrt(qr.inverse().trace());
}

TdoaSet geometric_tdoa(const std::map<NodeId, Vec3>& positions, NodeId reference, double c, const Vec3& source) {
  check_speed(c);
  const auto ref = positions.find(reference);
  if (ref == positions.end()) throw ParameterError("geometric_tdoa: reference position missing");
  const double dref = (source - ref->second).norm();
  TdoaSet out;
  out.reference = reference;
  for (const auto& [id, p] : positions) {
    if (id == reference) continue;
    out.entries.push_back(TdoaEntry{id, ((source - p).norm() - dref) / c, 1.0, false});
  }
  return out;
}

}  // namespace umic
