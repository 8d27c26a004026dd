#pragma once

// Independent reference implementations used as test oracles. None of these
// call into the library code they are compared against; they share only the
// plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "neoward/alerts.hpp"
#include "neoward/monitorocr.hpp"
#include "neoward/smt.hpp"
#include "neoward/store.hpp"

namespace oracle {

// ---- attention -----------------------------------------------------------------

/// Offsets allowed between query and key: 0 and +-2^k while 2^k < 2^floor(log2 n).
inline bool allowed_offset(long delta, std::size_t n) {
  if (delta == 0) return true;
  long mag = delta < 0 ? -delta : delta;
  if ((mag & (mag - 1)) != 0) return false;  // not a power of two
  // largest power of two <= n
  std::size_t top = 1;
  while (top * 2 <= n) top *= 2;
  return static_cast<std::size_t>(mag) < top;
}

/// Dense n x n attention per head with the sparse pattern applied as a mask.
inline neoward::smt::Matrix dense_masked_attention(const neoward::smt::Matrix& q, const neoward::smt::Matrix& k,
                                                   const neoward::smt::Matrix& v, std::size_t heads,
                                                   const neoward::smt::Matrix& u, const neoward::smt::Matrix& vb,
                                                   const neoward::smt::Matrix& omega) {
  const std::size_t n = q.rows, d = q.cols, dh = d / heads, K = omega.cols;
  neoward::smt::Matrix out(n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> score(n, -std::numeric_limits<double>::infinity());
      for (std::size_t j = 0; j < n; ++j) {
        const long delta = static_cast<long>(j) - static_cast<long>(i);
        if (!allowed_offset(delta, n)) continue;
        double s = 0;
        for (std::size_t t = 0; t < dh; ++t) s += q(i, h * dh + t) * k(j, h * dh + t);
        s /= std::sqrt(static_cast<double>(dh));
        const double rel = static_cast<double>(static_cast<long>(i) - static_cast<long>(j));
        for (std::size_t f = 0; f < K; ++f)
          s += u(h, f) * std::sin(omega(0, f) * rel) + vb(h, f) * std::cos(omega(0, f) * rel);
        score[j] = s;
      }
      const double mx = *std::max_element(score.begin(), score.end());
      double z = 0;
      for (auto& s : score) {
        s = std::isinf(s) ? 0.0 : std::exp(s - mx);
        z += s;
      }
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t t = 0; t < dh; ++t) out(i, h * dh + t) += score[j] / z * v(j, h * dh + t);
    }
  }
  return out;
}

inline std::size_t masked_edge_count(std::size_t n) {
  std::size_t e = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (allowed_offset(static_cast<long>(j) - static_cast<long>(i), n)) ++e;
  return e;
}

// ---- monitor value selection --------------------------------------------------------

inline std::optional<int> leading_integer(const std::string& raw) {
  std::string s = raw;
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.erase(s.begin());
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  const auto dot = s.find('.');
  std::string whole = s.substr(0, dot);
  if (whole.empty() || whole.size() > 6) return std::nullopt;
  for (char c : whole)
    if (c < '0' || c > '9') return std::nullopt;
  if (dot != std::string::npos) {
    const std::string frac = s.substr(dot + 1);
    if (frac.empty()) return std::nullopt;
    for (char c : frac)
      if (c < '0' || c > '9') return std::nullopt;
  }
  return std::stoi(whole);
}

/// Scans every box, keeps the in-region in-range numeric ones, then sorts by
/// (area desc, distance asc, y asc, x asc) and takes the first.
inline std::optional<neoward::ocr::TextBox> brute_force_select(const neoward::ocr::Rect& region,
                                                               const std::vector<neoward::ocr::TextBox>& boxes,
                                                               neoward::ocr::ValueRange range,
                                                               const neoward::ocr::TextBox& anchor) {
  struct Cand {
    double area, dist, y, x;
    std::size_t idx;
  };
  std::vector<Cand> c;
  const double ax = anchor.x + anchor.w / 2, ay = anchor.y + anchor.h / 2;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i];
    const double cx = b.x + b.w / 2, cy = b.y + b.h / 2;
    if (cx < region.x0 || cx > region.x1 || cy < region.y0 || cy > region.y1) continue;
    const auto v = leading_integer(b.text);
    if (!v || *v < range.lo || *v > range.hi) continue;
    c.push_back({b.w * b.h, std::hypot(cx - ax, cy - ay), b.y, b.x, i});
  }
  if (c.empty()) return std::nullopt;
  std::sort(c.begin(), c.end(), [](const Cand& a, const Cand& b) {
    if (a.area != b.area) return a.area > b.area;
    if (a.dist != b.dist) return a.dist < b.dist;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  return boxes[c.front().idx];
}

// ---- alerts ------------------------------------------------------------------------

inline double posterior(double prior, double r) { return prior * r / (prior * r + (1 - prior) * (1 - r)); }

/// Replays the greedy rule: gap <= min(W0 * phi^(members-1), Wmax) joins.
/// Returns the member count of each cluster in order.
inline std::vector<std::size_t> replay_partition(const std::vector<std::int64_t>& times, double w0, double phi,
                                                 double wmax) {
  std::vector<std::size_t> sizes;
  std::int64_t last = 0;
  for (auto t : times) {
    if (!sizes.empty()) {
      const double w = std::min(w0 * std::pow(phi, static_cast<double>(sizes.back() - 1)), wmax);
      if (static_cast<double>(t - last) <= w) {
        ++sizes.back();
        last = t;
        continue;
      }
    }
    sizes.push_back(1);
    last = t;
  }
  return sizes;
}

// ---- sync ------------------------------------------------------------------------------

/// Entities whose (version, payload) differ between two snapshots.
inline std::set<neoward::RecordKey> snapshot_diff(const std::map<neoward::RecordKey, neoward::StoredRecord>& before,
                                                  const std::map<neoward::RecordKey, neoward::StoredRecord>& after) {
  std::set<neoward::RecordKey> out;
  for (const auto& [k, rec] : after) {
    auto it = before.find(k);
    if (it == before.end() || it->second.version != rec.version || it->second.payload != rec.payload) out.insert(k);
  }
  return out;
}

// ---- calibration -------------------------------------------------------------------------

inline double ece_reference(const std::vector<std::array<double, 3>>& probs, const std::vector<int>& labels,
                            int bins = 10) {
  std::vector<double> conf_sum(bins, 0), acc_sum(bins, 0);
  std::vector<int> count(bins, 0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    int pred = 0;
    for (int c = 1; c < 3; ++c)
      if (probs[i][c] > probs[i][pred]) pred = c;
    const double conf = probs[i][pred];
    int b = static_cast<int>(conf * bins);
    if (b == bins) b = bins - 1;
    conf_sum[b] += conf;
    acc_sum[b] += pred == labels[i] ? 1.0 : 0.0;
    ++count[b];
  }
  double e = 0;
  for (int b = 0; b < bins; ++b)
    if (count[b]) e += std::abs(acc_sum[b] - conf_sum[b]) / static_cast<double>(probs.size());
  return e;
}

}  // namespace oracle
