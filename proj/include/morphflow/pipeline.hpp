#pragma once

// Bidirectional two-stage model, synthetic data, training, inference, evaluation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "morphflow/cloud.hpp"
#include "morphflow/distort.hpp"
#include "morphflow/nn.hpp"
#include "morphflow/stage1.hpp"
#include "morphflow/stage2.hpp"

namespace morphflow::pipeline {

using nn::Value;
using Points = std::vector<Vec3>;

struct TrainConfig {
  std::string preset = "desk";
  std::uint64_t seed = 1;
  std::size_t epochs = 30;
  double lr = 0.001;
  std::vector<std::size_t> lr_drops{15, 23};
  double lr_factor = 0.1;
  std::size_t batch_size = 2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  distort::LossWeights weights;
  std::size_t k_local = 16;
  std::size_t n_points = 1024;
  bool coarse_only = false;
  stage1::StageConfig stage1;
  stage2::LiaConfig lia;
  // Preprocessing.
  std::size_t outlier_k = 16;
  double outlier_std_ratio = 2.0;
  double dbscan_eps = 0.0;  ///< 0 picks 3x the mean nearest-neighbor spacing
  std::size_t dbscan_min_pts = 4;
  std::size_t preprocess_points = 2048;  ///< FPS target of preprocessing

  static TrainConfig desk();
  static TrainConfig paper();
  static TrainConfig for_preset(const std::string& name);

  /// Parses `key = value` lines ('#' comments, optional [section] headers ignored)
  /// over the preset named by the `preset` key (desk when absent).
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
  /// Applies one key; throws InvalidArgument on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  /// Canonical text form; parse(to_text()) reproduces the config.
  std::string to_text() const;
  /// Model-shaping subset of to_text(); checkpoints compare on this.
  std::string model_text() const;
  void validate() const;
  double lr_at(std::size_t epoch) const;
};

/// Four independent parameter groups in one ParamSet.
struct BidirModel {
  TrainConfig config;
  nn::ParamSet params;
  stage1::Stage1Params coarse_to_face;  ///< B -> F^
  stage1::Stage1Params coarse_to_bone;  ///< F -> B^
  stage2::Stage2Params fine_face;       ///< refines F^
  stage2::Stage2Params fine_bone;       ///< refines B^

  explicit BidirModel(const TrainConfig& cfg);
  BidirModel(const BidirModel&) = delete;
  BidirModel& operator=(const BidirModel&) = delete;

  /// Zeroes every displacement head's final layer (identity map).
  void zero_heads();
};

struct DirectionOutput {
  Value coarse;        ///< H^
  Value fine;          ///< H (equals coarse in coarse-only mode)
  Value f_global;
  Value coarse_field;  ///< coarse displacement
  Value fine_field;    ///< fine displacement
  Value total_field;   ///< fine - source
};

struct ForwardResult {
  DirectionOutput face;  ///< predicted from bone
  DirectionOutput bone;  ///< predicted from face
};

/// Seeds for the four noise draws of one forward pass.
struct NoiseSeeds {
  std::uint64_t coarse_face, coarse_bone, fine_face, fine_bone;
  static NoiseSeeds from(std::uint64_t seed);
};

/// Runs B -> F^ -> F and F -> B^ -> B. Plans are rebuilt when not supplied.
ForwardResult model_forward(const BidirModel& model, const Points& face, const Points& bone, std::uint64_t seed,
                            const stage1::CoarsePlan* plan_from_face = nullptr,
                            const stage1::CoarsePlan* plan_from_bone = nullptr);

struct SyntheticPair {
  std::string id;
  cloud::PointCloud bone, face;
  std::vector<cloud::RoiLabel> rois;  ///< nose and lip, one label per side
  IndexList correspondence;           ///< bone i <-> face correspondence[i]
  std::vector<double> bone_radius, face_radius;  ///< per bone index, before normalization
  std::uint64_t seed = 0;
};

std::vector<SyntheticPair> synth_generate(std::uint64_t seed, std::size_t n_points, std::size_t n_pairs);

/// Writes <id>_face.ply, <id>_bone.ply and <id>_roi.json per pair.
void write_pairs(const std::vector<SyntheticPair>& pairs, const std::filesystem::path& dir);

struct PairData {
  std::string id;
  Points face, bone;
  std::vector<cloud::RoiLabel> rois;
};

/// Reads pairs written by write_pairs (sorted by id).
std::vector<PairData> read_pairs(const std::filesystem::path& dir);
PairData to_pair_data(const SyntheticPair& pair);

/// Face/bone index sets per ROI name present on both sides.
std::vector<distort::RoiIndexPair> roi_indices(const PairData& pair);

struct Provenance {
  std::string source;
  Vec3 center = Vec3::Zero();
  double scale = 1.0;
  std::size_t input_points = 0, after_outliers = 0, after_dbscan = 0, output_points = 0;
};

struct PreprocessResult {
  cloud::PointCloud cloud;
  Provenance provenance;
};

/// Outlier removal, largest DBSCAN cluster, normalization, FPS to preprocess_points
/// (selected points keep their input order).
PreprocessResult preprocess_cloud(const cloud::PointCloud& input, const TrainConfig& cfg);

/// Preprocesses each file into out_dir as <stem>.ply plus <stem>.json provenance.
std::vector<PreprocessResult> preprocess_run(const std::vector<std::filesystem::path>& inputs,
                                             const std::filesystem::path& out_dir, const TrainConfig& cfg);

void write_provenance(const Provenance& p, const std::filesystem::path& path);
Provenance read_provenance(const std::filesystem::path& path);

/// Training sample with everything derived from the fixed inputs cached.
struct PreparedPair {
  PairData data;
  stage1::CoarsePlan plan_from_face, plan_from_bone;
  std::vector<Index> face_knn, bone_knn;  ///< K_local self-inclusive tables
  std::vector<distort::RoiIndexPair> rois;  ///< filled only when aux is enabled
};

PreparedPair prepare_pair(const PairData& pair, const TrainConfig& cfg);

struct LossBreakdown {
  distort::LossParts parts;
  Value total;
};

LossBreakdown compute_loss(const BidirModel& model, const PreparedPair& pair, const ForwardResult& fwd);

struct StepRecord {
  std::size_t epoch = 0, step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<StepRecord> curve;
  std::vector<double> epoch_loss;
  std::string digest;  ///< checkpoint digest at the end of training
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  ///< checkpoints written here
  std::function<void(const StepRecord&)> on_step;
  std::function<void(std::size_t epoch, double mean_loss)> on_epoch;
};

/// Adam over all parameter groups on the total loss with the step schedule.
TrainResult train_run(BidirModel& model, const std::vector<PairData>& train, const TrainOptions& options = {});

// Checkpoints: "MFCK", version, FNV-1a-64 digest of the payload, payload.
struct CheckpointMeta {
  std::size_t epoch = 0;
  std::string rng_state;
  std::string digest;
};

std::string checkpoint_bytes(const BidirModel& model, std::size_t epoch, const std::string& rng_state);
std::string digest_of(const BidirModel& model, std::size_t epoch = 0, const std::string& rng_state = "");
void save_checkpoint(const BidirModel& model, const std::filesystem::path& path, std::size_t epoch = 0,
                     const std::string& rng_state = "");
/// Loads into a fresh model. With `expected`, a differing model config raises ConfigMismatch.
std::unique_ptr<BidirModel> load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr,
                                            const TrainConfig* expected = nullptr);

/// Finite-difference check of the full training loss on a small synthetic pair.
/// Zero-initialized entries are perturbed first so every gradient path is live.
nn::GradCheckResult gradcheck_loss(std::uint64_t seed, std::size_t n_points = 32, bool aux = true,
                                   std::size_t max_entries_per_param = 8);

enum class Direction { face2bone, bone2face };
Direction parse_direction(const std::string& s);
std::string to_string(Direction d);

struct InferOutput {
  cloud::PointCloud fine, coarse;
};

/// Predicts the other shape from one cloud. The input must match the model's n_points.
InferOutput infer(const BidirModel& model, const cloud::PointCloud& input, Direction dir, std::uint64_t seed);

/// File-level inference; writes `out` and, with emit_coarse, `<stem>_coarse<ext>`.
InferOutput infer_run(const std::filesystem::path& checkpoint, const std::filesystem::path& input, Direction dir,
                      const std::filesystem::path& out, bool emit_coarse = false,
                      const std::optional<std::filesystem::path>& provenance = std::nullopt, std::uint64_t seed = 0);

struct EvalPrediction {
  std::string id;
  Points pred_face, pred_bone;      ///< fine (or coarse when coarse-only)
  Points coarse_face, coarse_bone;
};

/// Runs the model on each pair with a fixed noise seed.
std::vector<EvalPrediction> predict_pairs(const BidirModel& model, const std::vector<PairData>& pairs,
                                          std::uint64_t seed = 0);

struct EvalOptions {
  bool with_rois = false;
  bool emd = true;
};

/// Whole-cloud rows per pair and direction, plus ROI rows when requested.
distort::MetricReport evaluate_predictions(const std::vector<PairData>& pairs, const std::vector<EvalPrediction>& preds,
                                           const EvalOptions& options = {});

distort::MetricReport evaluate_run(const BidirModel& model, const std::vector<PairData>& pairs,
                                   const EvalOptions& options = {});

/// Per-metric rank-sum p-values between two reports over matching rows.
std::map<std::string, double> compare_reports(const distort::MetricReport& a, const distort::MetricReport& b,
                                              const std::string& region = "all");

/// Mean ROI-restricted chamfer over pairs, labels and both directions.
double roi_chamfer(const std::vector<PairData>& pairs, const std::vector<EvalPrediction>& preds);

}  // namespace morphflow::pipeline
