#pragma once

// Motion-driven pixel-wise contrastive objective.
//
// Pairs of sampled pixels are soft-labelled positive (nearby, moving alike) or
// negative (far apart, moving differently; or one moving and one static) from
// the predicted flow. Features are then pulled together / pushed apart with a
// weighted log-softmax over the negatives of every anchor, both within the
// earlier frame and across the frame pair through the flow correspondence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "conjflow/random.hpp"
#include "conjflow/tensor.hpp"
#include "conjflow/warp.hpp"

namespace conjflow {

inline constexpr double kCosineFloor = 1e-8;

enum class DistanceNorm { SampledMax, Diagonal };
enum class SamplingMode { MotionFeatures, Motion, Uniform };

struct ContrastiveParams {
  double temperature = 0.5;  // tau
  double tau_p = 0.9;
  double tau_n = 0.0;
  double tau_m = 1.5;        // static threshold on flow magnitude
  bool adaptive_tau_m = false;
  int eta = 100;
  double keep_fraction = 1.0;  // aleph
  DistanceNorm distance_norm = DistanceNorm::SampledMax;
  SamplingMode sampling = SamplingMode::MotionFeatures;

  void validate() const {
    if (!(temperature > 0)) throw std::invalid_argument("contrastive: temperature must be > 0");
    if (tau_p < -1 || tau_p > 1 || tau_n < -1 || tau_n > 1)
      throw std::invalid_argument("contrastive: tau_p, tau_n must lie in [-1, 1]");
    if (tau_p < tau_n) throw std::invalid_argument("contrastive: tau_p must be >= tau_n");
    if (tau_m < 0) throw std::invalid_argument("contrastive: tau_m must be >= 0");
    if (eta < 1) throw std::invalid_argument("contrastive: eta must be >= 1");
    if (!(keep_fraction > 0 && keep_fraction <= 1)) throw std::invalid_argument("contrastive: aleph must be in (0, 1]");
  }
};

/// Static/moving threshold for this flow: fixed tau_m, or the frame-mean magnitude in adaptive mode.
template <typename T>
double static_threshold(const Tensor<T>& flow, const ContrastiveParams& params) {
  if (!params.adaptive_tau_m) return params.tau_m;
  double sum = 0;
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x) sum += std::hypot(double(flow(0, y, x)), double(flow(1, y, x)));
  return flow.plane() ? sum / static_cast<double>(flow.plane()) : 0.0;
}

template <typename T>
bool is_moving(const Tensor<T>& flow, Coord c, double threshold) {
  return std::hypot(double(flow(0, c.y, c.x)), double(flow(1, c.y, c.x))) >= threshold;
}

// ---------------------------------------------------------------------------
// Sampling

struct SampleSet {
  std::vector<Coord> coords;
  std::int64_t t = 0;
  std::size_t size() const { return coords.size(); }
};

/// Per-pixel sampling probabilities, balanced across the partition cells
/// (moving / static) x (index of the strongest feature channel).
struct SamplingDistribution {
  int height = 0, width = 0;
  int num_cells = 0;
  std::vector<double> prob;       // row-major
  std::vector<int> cell;          // partition cell of every pixel
  std::vector<std::size_t> cell_size;

  int nonempty_cells() const {
    return static_cast<int>(std::count_if(cell_size.begin(), cell_size.end(), [](std::size_t n) { return n > 0; }));
  }
  double cell_mass(int k) const {
    double m = 0;
    for (std::size_t i = 0; i < prob.size(); ++i)
      if (cell[i] == k) m += prob[i];
    return m;
  }
  std::size_t support() const {
    return static_cast<std::size_t>(std::count_if(prob.begin(), prob.end(), [](double p) { return p > 0; }));
  }
};

/// Cells are numbered j for moving pixels whose |f| peaks at channel j, and d + j for static ones.
template <typename T>
SamplingDistribution build_sampling_distribution(const Tensor<T>& flow, const Tensor<T>& f_prev, double tau_m,
                                                 SamplingMode mode = SamplingMode::MotionFeatures) {
  Tensor<T>::require_same_grid(flow, f_prev, "build_sampling_distribution");
  if (f_prev.channels() < 1) throw ShapeError("build_sampling_distribution: features need >= 1 channel");
  const int d = mode == SamplingMode::MotionFeatures ? f_prev.channels() : 1;
  SamplingDistribution dist;
  dist.height = flow.height();
  dist.width = flow.width();
  dist.num_cells = mode == SamplingMode::Uniform ? 1 : 2 * d;
  dist.cell.resize(flow.plane());
  dist.prob.resize(flow.plane());
  dist.cell_size.assign(dist.num_cells, 0);
  for (int y = 0; y < flow.height(); ++y) {
    for (int x = 0; x < flow.width(); ++x) {
      int j = 0;
      if (mode == SamplingMode::MotionFeatures) {
        T best = -1;
        for (int c = 0; c < f_prev.channels(); ++c) {
          const T a = std::abs(f_prev(c, y, x));
          if (a > best) {
            best = a;
            j = c;
          }
        }
      }
      int k = j;
      if (mode != SamplingMode::Uniform && !is_moving(flow, {y, x}, tau_m)) k += d;
      const std::size_t i = static_cast<std::size_t>(y) * flow.width() + x;
      dist.cell[i] = k;
      ++dist.cell_size[k];
    }
  }
  const double per_cell = 1.0 / dist.nonempty_cells();
  for (std::size_t i = 0; i < dist.prob.size(); ++i) dist.prob[i] = per_cell / dist.cell_size[dist.cell[i]];
  return dist;
}

namespace detail {

// Fenwick tree over sampling weights, supporting draw-and-remove.
class WeightTree {
 public:
  explicit WeightTree(const std::vector<double>& w) : n_(w.size()), tree_(w.size() + 1, 0.0), w_(w) {
    for (std::size_t i = 0; i < n_; ++i) add(i, w[i]);
    top_ = 1;
    while (top_ * 2 <= n_) top_ *= 2;
  }
  double total() const {
    double s = 0;
    for (std::size_t i = n_; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }
  // Smallest index whose inclusive prefix sum exceeds `target`.
  std::size_t find(double target) const {
    std::size_t pos = 0;
    for (std::size_t step = top_; step > 0; step >>= 1) {
      if (pos + step <= n_ && tree_[pos + step] <= target) {
        pos += step;
        target -= tree_[pos];
      }
    }
    std::size_t i = std::min(pos, n_ - 1);
    // Guard against rounding landing on a removed/zero-weight slot.
    while (i < n_ && w_[i] <= 0) ++i;
    if (i == n_) {
      i = pos < n_ ? pos : n_ - 1;
      while (w_[i] <= 0) --i;
    }
    return i;
  }
  void remove(std::size_t i) {
    add(i, -w_[i]);
    w_[i] = 0;
  }

 private:
  void add(std::size_t i, double v) {
    for (std::size_t k = i + 1; k <= n_; k += k & (~k + 1)) tree_[k] += v;
  }
  std::size_t n_, top_ = 1;
  std::vector<double> tree_, w_;
};

}  // namespace detail

/// eta distinct coordinates drawn without replacement in proportion to dist.prob.
inline SampleSet sample_coords(const SamplingDistribution& dist, int eta, Rng& rng, std::int64_t t = 0) {
  if (eta < 1) throw std::invalid_argument("sample_coords: eta must be >= 1");
  if (static_cast<std::size_t>(eta) > dist.support())
    throw std::invalid_argument("sample_coords: eta=" + std::to_string(eta) + " exceeds the " +
                                std::to_string(dist.support()) + " pixels with positive probability");
  detail::WeightTree tree(dist.prob);
  SampleSet s;
  s.t = t;
  for (int k = 0; k < eta; ++k) {
    const std::size_t i = tree.find(uniform01(rng) * tree.total());
    s.coords.push_back({static_cast<int>(i / dist.width), static_cast<int>(i % dist.width)});
    tree.remove(i);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Pair scoring

/// Soft positive/negative confidences over all ordered pairs of sampled coordinates.
template <typename T>
struct PairScores {
  int size = 0;
  std::vector<T> p, n;

  PairScores() = default;
  explicit PairScores(int eta) : size(eta), p(std::size_t(eta) * eta, T(0)), n(std::size_t(eta) * eta, T(0)) {}
  T& pos(int i, int k) { return p[std::size_t(i) * size + k]; }
  T& neg(int i, int k) { return n[std::size_t(i) * size + k]; }
  T pos(int i, int k) const { return p[std::size_t(i) * size + k]; }
  T neg(int i, int k) const { return n[std::size_t(i) * size + k]; }
  T positive_mass() const { return std::accumulate(p.begin(), p.end(), T(0)); }
};

/// tau^{-1} cos(a, b) with the norm product floored at kCosineFloor.
template <typename T>
T similarity(std::span<const T> a, std::span<const T> b, double tau) {
  if (a.size() != b.size()) throw ShapeError("similarity: length mismatch");
  T dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const T denom = std::max(std::sqrt(na) * std::sqrt(nb), T(kCosineFloor));
  return dot / (denom * static_cast<T>(tau));
}

template <typename T>
PairScores<T> pair_scores(const SampleSet& samples, const Tensor<T>& flow, const ContrastiveParams& params) {
  const int eta = static_cast<int>(samples.size());
  for (const Coord& c : samples.coords)
    if (c.y < 0 || c.x < 0 || c.y >= flow.height() || c.x >= flow.width())
      throw std::out_of_range("pair_scores: coordinate out of bounds");
  const double threshold = static_threshold(flow, params);
  std::vector<bool> moving(eta);
  std::vector<T> fv(2 * std::size_t(eta));
  for (int i = 0; i < eta; ++i) {
    const Coord c = samples.coords[i];
    moving[i] = is_moving(flow, c, threshold);
    fv[2 * i] = flow(0, c.y, c.x);
    fv[2 * i + 1] = flow(1, c.y, c.x);
  }
  double max_dist = 0;
  if (params.distance_norm == DistanceNorm::Diagonal) {
    max_dist = std::hypot(double(flow.height()), double(flow.width()));
  } else {
    for (int i = 0; i < eta; ++i)
      for (int k = i + 1; k < eta; ++k)
        max_dist = std::max(max_dist, std::hypot(double(samples.coords[i].y - samples.coords[k].y),
                                                 double(samples.coords[i].x - samples.coords[k].x)));
  }
  PairScores<T> s(eta);
  for (int i = 0; i < eta; ++i) {
    for (int k = 0; k < eta; ++k) {
      if (!moving[i] && !moving[k]) continue;
      if (moving[i] != moving[k]) {
        s.neg(i, k) = T(1);
        continue;
      }
      const double dist = std::hypot(double(samples.coords[i].y - samples.coords[k].y),
                                     double(samples.coords[i].x - samples.coords[k].x));
      const double nd = max_dist > 0 ? std::min(dist / max_dist, 1.0) : 0.0;
      const double sim = similarity<T>(std::span<const T>(fv).subspan(2 * i, 2),
                                       std::span<const T>(fv).subspan(2 * k, 2), 1.0);
      if (sim > params.tau_p) s.pos(i, k) = static_cast<T>(1.0 - nd);
      else if (sim <= params.tau_n) s.neg(i, k) = static_cast<T>(nd);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Loss

/// Features gathered at the sampled coordinates. The second element of each pair
/// is read at x + flow(x) with bilinear interpolation.
template <typename T>
struct GatheredFeatures {
  int dim = 0;
  std::vector<T> anchors, others;  // eta x dim, row-major
  std::vector<T> anchor_norm, other_norm;
  std::vector<T> sims;             // eta x eta, tau-scaled
};

template <typename T>
GatheredFeatures<T> gather_features(const Tensor<T>& g, const Tensor<T>& h, const Tensor<T>* flow,
                                    const SampleSet& samples, double tau) {
  Tensor<T>::require_same_shape(g, h, "contrastive");
  if (flow) Tensor<T>::require_same_grid(g, *flow, "contrastive");
  const int eta = static_cast<int>(samples.size()), C = g.channels();
  GatheredFeatures<T> f;
  f.dim = C;
  f.anchors.resize(std::size_t(eta) * C);
  f.others.resize(std::size_t(eta) * C);
  f.anchor_norm.resize(eta);
  f.other_norm.resize(eta);
  for (int i = 0; i < eta; ++i) {
    const Coord c = samples.coords[i];
    for (int ch = 0; ch < C; ++ch) f.anchors[std::size_t(i) * C + ch] = g(ch, c.y, c.x);
    const T sy = c.y + (flow ? (*flow)(1, c.y, c.x) : T(0));
    const T sx = c.x + (flow ? (*flow)(0, c.y, c.x) : T(0));
    sample_vector<T>(h, sy, sx, std::span<T>(f.others).subspan(std::size_t(i) * C, C));
    T na = 0, nb = 0;
    for (int ch = 0; ch < C; ++ch) {
      na += f.anchors[std::size_t(i) * C + ch] * f.anchors[std::size_t(i) * C + ch];
      nb += f.others[std::size_t(i) * C + ch] * f.others[std::size_t(i) * C + ch];
    }
    f.anchor_norm[i] = std::sqrt(na);
    f.other_norm[i] = std::sqrt(nb);
  }
  f.sims.resize(std::size_t(eta) * eta);
  for (int i = 0; i < eta; ++i)
    for (int j = 0; j < eta; ++j)
      f.sims[std::size_t(i) * eta + j] =
          similarity<T>(std::span<const T>(f.anchors).subspan(std::size_t(i) * C, C),
                        std::span<const T>(f.others).subspan(std::size_t(j) * C, C), tau);
  return f;
}

/// Keeps the ceil(aleph * count) least-similar positives and most-similar negatives.
template <typename T>
PairScores<T> filter_pairs(const PairScores<T>& scores, std::span<const T> sims, double keep_fraction) {
  if (!(keep_fraction > 0 && keep_fraction <= 1)) throw std::invalid_argument("filter_pairs: aleph must be in (0, 1]");
  if (sims.size() != scores.p.size()) throw ShapeError("filter_pairs: similarity matrix size mismatch");
  if (keep_fraction >= 1) return scores;
  PairScores<T> out(scores.size);
  auto select = [&](const std::vector<T>& src, std::vector<T>& dst, bool keep_low) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < src.size(); ++i)
      if (src[i] != T(0)) idx.push_back(i);
    const auto keep = static_cast<std::size_t>(std::ceil(keep_fraction * idx.size() - 1e-9));
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return keep_low ? sims[a] < sims[b] : sims[a] > sims[b];
    });
    for (std::size_t k = 0; k < keep && k < idx.size(); ++k) dst[idx[k]] = src[idx[k]];
  };
  select(scores.p, out.p, true);
  select(scores.n, out.n, false);
  return out;
}

template <typename T>
struct ContrastiveResult {
  T value = 0;
  Tensor<T> d_g, d_h;
};

/// -sum_ij p_ij / Z * log( e^{s_ij} / (e^{s_ij} + sum_z n_iz e^{s_iz}) ), zero when Z = 0.
/// Flow is a constant: no gradient is returned for it.
template <typename T>
ContrastiveResult<T> contrastive_core_grad(const Tensor<T>& g, const Tensor<T>& h, const Tensor<T>* flow,
                                           const PairScores<T>& scores, const SampleSet& samples,
                                           const ContrastiveParams& params, bool want_grad = true,
                                           const GatheredFeatures<T>* pre = nullptr) {
  const int eta = static_cast<int>(samples.size());
  if (scores.size != eta) throw ShapeError("contrastive_core: scores do not match the sample set");
  ContrastiveResult<T> r;
  if (want_grad) {
    r.d_g = Tensor<T>(g.channels(), g.height(), g.width());
    r.d_h = Tensor<T>(h.channels(), h.height(), h.width());
  }
  const T Z = scores.positive_mass();
  if (Z <= T(0)) return r;

  GatheredFeatures<T> local;
  if (!pre) local = gather_features(g, h, flow, samples, params.temperature);
  const GatheredFeatures<T>& f = pre ? *pre : local;
  const int C = f.dim;
  const std::vector<T>& s = f.sims;

  std::vector<T> G(std::size_t(eta) * eta, T(0));  // dL/ds
  T total = 0;
  std::vector<T> E(eta);
  for (int i = 0; i < eta; ++i) {
    const T* si = s.data() + std::size_t(i) * eta;
    // Negatives are summed relative to their own maximum; each positive then shifts by max(s_ij, m_neg).
    bool any_neg = false;
    T m_neg = 0;
    for (int z = 0; z < eta; ++z)
      if (scores.neg(i, z) != T(0)) {
        m_neg = any_neg ? std::max(m_neg, si[z]) : si[z];
        any_neg = true;
      }
    T neg_sum = 0;
    if (any_neg)
      for (int z = 0; z < eta; ++z) {
        E[z] = scores.neg(i, z) != T(0) ? std::exp(si[z] - m_neg) : T(0);
        neg_sum += scores.neg(i, z) * E[z];
      }
    T coupling = 0;  // sum_j (p_ij / Z) e^{m_neg} / D_ij
    for (int j = 0; j < eta; ++j) {
      const T pij = scores.pos(i, j);
      if (pij == T(0)) continue;
      const T w = pij / Z;
      const T m = any_neg ? std::max(si[j], m_neg) : si[j];
      const T ep = std::exp(si[j] - m);
      const T en = any_neg ? std::exp(m_neg - m) : T(0);
      const T denom = ep + neg_sum * en;
      total += w * (std::log(denom) + m - si[j]);
      if (want_grad) {
        G[std::size_t(i) * eta + j] += w * (ep / denom - T(1));
        coupling += w * en / denom;
      }
    }
    if (want_grad && coupling != T(0))
      for (int z = 0; z < eta; ++z)
        if (scores.neg(i, z) != T(0)) G[std::size_t(i) * eta + z] += coupling * scores.neg(i, z) * E[z];
  }
  r.value = total;
  if (!want_grad) return r;

  const T inv_tau = T(1) / static_cast<T>(params.temperature);
  const T floor = T(kCosineFloor);
  std::vector<T> dA(std::size_t(eta) * C, T(0)), dB(std::size_t(eta) * C, T(0));
  for (int i = 0; i < eta; ++i) {
    const T* a = f.anchors.data() + std::size_t(i) * C;
    for (int j = 0; j < eta; ++j) {
      const T gij = G[std::size_t(i) * eta + j];
      if (gij == T(0)) continue;
      const T* b = f.others.data() + std::size_t(j) * C;
      const T na = f.anchor_norm[i], nb = f.other_norm[j];
      const T prod = na * nb;
      T* da = dA.data() + std::size_t(i) * C;
      T* db = dB.data() + std::size_t(j) * C;
      if (prod > floor) {
        const T cosv = s[std::size_t(i) * eta + j] / inv_tau;  // un-scaled cosine
        const T ka = gij * inv_tau / prod, kb = gij * inv_tau / prod;
        for (int c = 0; c < C; ++c) {
          da[c] += ka * b[c] - gij * inv_tau * cosv * a[c] / (na * na);
          db[c] += kb * a[c] - gij * inv_tau * cosv * b[c] / (nb * nb);
        }
      } else {
        for (int c = 0; c < C; ++c) {
          da[c] += gij * inv_tau * b[c] / floor;
          db[c] += gij * inv_tau * a[c] / floor;
        }
      }
    }
  }
  for (int i = 0; i < eta; ++i) {
    const Coord c = samples.coords[i];
    for (int ch = 0; ch < C; ++ch) r.d_g(ch, c.y, c.x) += dA[std::size_t(i) * C + ch];
    const T sy = c.y + (flow ? (*flow)(1, c.y, c.x) : T(0));
    const T sx = c.x + (flow ? (*flow)(0, c.y, c.x) : T(0));
    const BilinearTap<T> tap(sx, sy, h.width(), h.height());
    for (int ch = 0; ch < C; ++ch) tap.scatter(r.d_h.channel(ch), h.width(), dB[std::size_t(i) * C + ch]);
  }
  return r;
}

template <typename T>
T contrastive_core(const Tensor<T>& g, const Tensor<T>& h, const Tensor<T>* flow, const PairScores<T>& scores,
                   const SampleSet& samples, const ContrastiveParams& params) {
  return contrastive_core_grad(g, h, flow, scores, samples, params, false).value;
}

template <typename T>
struct SelfSupervisedResult {
  T value = 0;
  T in_frame = 0, cross = 0;
  Tensor<T> d_prev;  // gradient on the fast-learner features of the earlier frame
  Tensor<T> d_cur;   // gradient the cross term would send to the later frame (unused in training)
};

/// In-frame term on f_prev (no warping) plus cross-temporal term f_prev vs. f_cur warped by flow.
/// Pair scores come from `flow` once and are shared by both terms; aleph filtering uses each term's similarities.
template <typename T>
SelfSupervisedResult<T> self_supervised_loss_grad(const Tensor<T>& f_prev, const Tensor<T>& f_cur,
                                                  const Tensor<T>& flow, const SampleSet& samples,
                                                  const ContrastiveParams& params, bool want_grad = true) {
  const PairScores<T> scores = pair_scores(samples, flow, params);
  SelfSupervisedResult<T> r;
  if (want_grad) {
    r.d_prev = Tensor<T>(f_prev.channels(), f_prev.height(), f_prev.width());
    r.d_cur = Tensor<T>(f_cur.channels(), f_cur.height(), f_cur.width());
  }
  if (scores.positive_mass() <= T(0)) return r;

  {
    const auto gathered = gather_features<T>(f_prev, f_prev, nullptr, samples, params.temperature);
    const auto kept = filter_pairs<T>(scores, gathered.sims, params.keep_fraction);
    auto c = contrastive_core_grad<T>(f_prev, f_prev, nullptr, kept, samples, params, want_grad, &gathered);
    r.in_frame = c.value;
    if (want_grad) {
      r.d_prev += c.d_g;
      r.d_prev += c.d_h;
    }
  }
  {
    const auto gathered = gather_features<T>(f_prev, f_cur, &flow, samples, params.temperature);
    const auto kept = filter_pairs<T>(scores, gathered.sims, params.keep_fraction);
    auto c = contrastive_core_grad<T>(f_prev, f_cur, &flow, kept, samples, params, want_grad, &gathered);
    r.cross = c.value;
    if (want_grad) {
      r.d_prev += c.d_g;
      r.d_cur += c.d_h;
    }
  }
  r.value = r.in_frame + r.cross;
  return r;
}

template <typename T>
T self_supervised_loss(const Tensor<T>& f_prev, const Tensor<T>& f_cur, const Tensor<T>& flow,
                       const SampleSet& samples, const ContrastiveParams& params) {
  return self_supervised_loss_grad(f_prev, f_cur, flow, samples, params, false).value;
}

}  // namespace conjflow
