#pragma once

// Streaming multimodal transformer at desk scale: conv embedding over the
// time x modality grid, log-strided sparse attention with a learned relative
// bias, two-stage attention fusion with static context, temperature-scaled
// 3-class head. Gradients are hand-derived reverse mode in float64.

#include <array>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "neoward/vitalsim.hpp"

namespace neoward::smt {

inline constexpr std::size_t kModalities = 4;
inline constexpr std::size_t kClasses = 3;

enum class RiskClass : int { kLow = 0, kModerate = 1, kHigh = 2 };
std::string_view risk_class_name(RiskClass c);
std::optional<RiskClass> parse_risk_class(std::string_view name);

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double* row(std::size_t r) { return data.data() + r * cols; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }
  bool operator==(const Matrix&) const = default;
};

struct ModelConfig {
  std::size_t window = 300;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t freqs = 8;
  std::size_t static_dim = 3;
  std::size_t semistatic_dim = 6;
  void validate() const;
  std::size_t head_dim() const { return d_model / heads; }
};

/// Every trainable tensor. Shapes (rows x cols):
///   conv_w d x 9 (3x3 taps, row-major over time offset then modality offset),
///   conv_b 1 x d, wq/wk/wv/wo d x d, u/v H x K, omega 1 x K, q1 1 x d,
///   ws d x static, bs 1 x d, wss d x semistatic, bss 1 x d, q2 1 x d,
///   c 1 x 3, wc 3 x d, bc 1 x 3.
struct Params {
  Matrix conv_w, conv_b, wq, wk, wv, wo, u, v, omega, q1, ws, bs, wss, bss, q2, c, wc, bc;

  static constexpr std::size_t kTensorCount = 18;
  std::array<Matrix*, kTensorCount> tensors();
  std::array<const Matrix*, kTensorCount> tensors() const;
  static const std::array<const char*, kTensorCount>& names();
  std::size_t size() const;
  bool operator==(const Params&) const = default;
};

Params zero_params(const ModelConfig& config);
Params init_params(const ModelConfig& config, std::uint64_t seed);

struct Normalization {
  std::array<double, kModalities> mean{140.0, 97.0, 45.0, 36.8};
  std::array<double, kModalities> std{10.0, 3.0, 8.0, 0.5};
};

struct Model {
  ModelConfig config;
  Params params;
  Normalization norm;
  double tau = 1.0;
};

/// One training/inference example, already normalized.
struct Example {
  Matrix window;                     // n x 4
  std::vector<double> statics;       // static_dim
  std::vector<double> semistatics;   // semistatic_dim
  int label = 0;
};

struct RiskScore {
  double p_low = 1.0 / 3;
  double p_moderate = 1.0 / 3;
  double p_high = 1.0 / 3;
  std::array<double, 3> as_array() const { return {p_low, p_moderate, p_high}; }
};

// ---- building blocks -------------------------------------------------------

/// Same-padded 3x3 convolution over (time x modality), 1 -> d channels, then
/// mean over modality. n x 4 -> n x d.
Matrix embed_window(const Matrix& window, const Params& params);

/// b(delta) = sum_k u_k sin(omega_k delta) + v_k cos(omega_k delta).
double relative_bias(long delta, std::span<const double> u, std::span<const double> v,
                     std::span<const double> omega);

/// Key offsets {0, +-1, +-2, ..., +-2^(floor(log2 n) - 1)} (unclipped).
std::vector<long> attention_offsets(std::size_t n);
/// Number of (query, key) pairs the pattern yields once clipped to [0, n).
std::size_t sparse_edge_count(std::size_t n);

/// Multi-head sparse attention before the output projection: per head,
/// softmax over the clipped offset set of q.k/sqrt(dh) + b_h(i - j).
/// Returns concatenated heads (n x d). `edges` receives pairs visited.
Matrix sparse_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads, const Matrix& u,
                        const Matrix& vbias, const Matrix& omega, std::size_t* edges = nullptr);

struct FusionResult {
  std::vector<double> fused;
  std::vector<double> summary;             // stage-1 output s
  std::vector<double> stage1_weights;      // n
  std::array<double, 3> stage2_weights{};  // s, static, semistatic
};

/// Stage 2 on its own: attention over `sources` with query q2 and per-source
/// logit biases.
std::vector<double> attend_sources(const std::vector<std::vector<double>>& sources, std::span<const double> q2,
                                   std::span<const double> bias, std::vector<double>* weights = nullptr);

FusionResult fuse(const Matrix& seq, std::span<const double> statics, std::span<const double> semistatics,
                  const Params& params);

std::array<double, 3> softmax3(const std::array<double, 3>& logits, double tau = 1.0);
RiskScore classify(std::span<const double> fused, const Params& params, double tau = 1.0);

/// Full forward pass to raw logits (temperature not applied).
std::array<double, 3> forward_logits(const Model& model, const Example& example);
RiskScore predict(const Model& model, const Example& example);

// ---- loss and training -------------------------------------------------------

inline constexpr double kProbFloor = 1e-12;

/// -alpha (1 - p)^gamma log p, with p clamped at 1e-12.
double focal_loss(std::span<const double> probs, int label, double gamma, double alpha);

/// alpha_c = N / (3 N_c); classes absent from the set get 0. Throws
/// kInvalidArgument for fewer than two distinct classes.
std::array<double, 3> class_weights(std::span<const int> labels);

/// Mean focal loss over `batch` (tau = 1) and, if `grad` is non-null, its
/// gradient w.r.t. every parameter (grad must be shaped like the params).
double loss_and_grad(const Model& model, std::span<const Example> batch, double gamma,
                     const std::array<double, 3>& alpha, Params* grad);

struct TrainConfig {
  std::size_t steps = 300;
  double lr = 0.05;
  double gamma = 2.0;
  std::uint64_t seed = 1;
  std::size_t eval_every = 25;
};

struct TrainPoint {
  std::size_t step = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_loss = 0;
  double val_acc = 0;
};

struct TrainReport {
  std::vector<TrainPoint> history;
  std::vector<double> step_loss;  // loss before each step
  std::array<double, 3> alpha{};
};

/// Full-batch gradient descent from init_params(seed). Deterministic.
TrainReport train(Model& model, std::span<const Example> train_set, std::span<const Example> val_set,
                  const TrainConfig& config);

double accuracy(const Model& model, std::span<const Example> set);

/// Stratified k-fold: returns, for each fold, the indices held out.
std::vector<std::vector<std::size_t>> stratified_kfold(std::span<const int> labels, std::size_t k,
                                                       std::uint64_t seed);

// ---- calibration -------------------------------------------------------------

double nll(std::span<const std::array<double, 3>> logits, std::span<const int> labels, double tau);
/// Expected calibration error over `bins` equal-width confidence bins; the
/// predicted class is the first argmax.
double ece(std::span<const std::array<double, 3>> probs, std::span<const int> labels, std::size_t bins = 10);

struct CalibrationResult {
  double tau = 1.0;
  double fitted_tau = 1.0;  // NLL optimum before the ECE guard
  double nll_before = 0, nll_after = 0;
  double ece_before = 0, ece_after = 0;
};

/// Golden-section search of log tau minimizing NLL. If the optimum would
/// raise ECE on the same set, tau stays 1.
CalibrationResult calibrate(std::span<const std::array<double, 3>> logits, std::span<const int> labels);

// ---- gradient check ----------------------------------------------------------

struct GradcheckEntry {
  std::string tensor;
  double max_rel_error = 0;
  double max_abs_grad = 0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> tensors;
  double max_rel_error = 0;
  std::size_t checked = 0;
};

/// Central differences on every parameter of a tiny random model. The
/// relative error of an entry is |a - f| / max(|a|, |f|, floor).
GradcheckReport gradcheck(const ModelConfig& config, std::uint64_t seed, double step = 1e-5, double floor = 1e-6);

// ---- data --------------------------------------------------------------------

struct RawWindow {
  std::vector<std::array<double, kModalities>> rows;  // natural units
  std::array<double, 3> statics{};  // maternal age y, previous complications, birth weight g
  std::vector<double> semistatics;  // weekly markers / feeding summary (z-scored)
  RiskClass label = RiskClass::kLow;
};

/// Label rule over a window in natural units:
///   high     >= 20 s with SpO2 < 85 %, or >= 15 s with RR < 15 /min
///   moderate >= 20 s with HR < 100, or >= 30 s with temp < 36.0 C, or >= 20 s with SpO2 < 90 %
///   low      otherwise
RiskClass label_window(const std::vector<std::array<double, kModalities>>& rows);

/// Scenario-driven windows (stable, bradycardia, hypothermia, desaturation,
/// apnea) with random onsets, magnitudes and static context.
std::vector<RawWindow> generate_dataset(std::size_t count, std::size_t window, std::uint64_t seed,
                                        std::size_t semistatic_dim = 6);

void write_dataset(const std::filesystem::path& dir, const std::vector<RawWindow>& windows);
std::vector<RawWindow> read_dataset(const std::filesystem::path& dir);

Normalization fit_normalization(std::span<const RawWindow> windows);
std::array<double, 3> normalize_statics(const std::array<double, 3>& raw);
Example to_example(const RawWindow& raw, const Normalization& norm);

// ---- model file ----------------------------------------------------------------

Bytes serialize_model(const Model& model);
Model deserialize_model(ByteView bytes);
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

// ---- streaming ---------------------------------------------------------------

/// Per-device 1 Hz sliding window. The last reading in each second wins; up to
/// 10 missing seconds are forward-filled, a longer gap marks the window
/// degraded until it has been refilled with real data.
class StreamInference {
 public:
  struct Emission {
    std::int64_t t_s = 0;
    RiskScore score;
  };

  StreamInference(const Model& model, std::array<double, 3> statics, std::vector<double> semistatics);

  /// Returns a score when this sample opens a new second and the window is
  /// full and not degraded.
  std::optional<Emission> push(const VitalSample& sample);
  bool degraded() const noexcept { return stale_count_ > 0; }
  std::size_t buffered() const noexcept { return rows_.size(); }

  static constexpr std::int64_t kMaxFillSeconds = 10;

 private:
  void append(const std::array<double, kModalities>& row, bool stale);

  const Model& model_;
  std::array<double, 3> statics_;
  std::vector<double> semistatics_;
  std::deque<std::array<double, kModalities>> rows_;
  std::optional<std::int64_t> last_s_;
  std::array<double, kModalities> last_row_{};
  std::deque<bool> stale_;  // row was filled across a gap longer than kMaxFillSeconds
  std::size_t stale_count_ = 0;
};

}  // namespace neoward::smt
