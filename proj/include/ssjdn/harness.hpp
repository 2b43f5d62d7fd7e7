#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssjdn/bsd.hpp"
#include "ssjdn/data.hpp"
#include "ssjdn/encoders.hpp"
#include "ssjdn/lsd.hpp"
#include "ssjdn/matching.hpp"
#include "ssjdn/retrieval.hpp"

namespace ssjdn {

enum class BetaSource { predicted, ground_truth };

struct Config {
  // Retrieval model
  int embed_dim = 64;  // d'
  int word_dim = 32;
  int max_caption_len = 16;
  int min_token_count = 1;
  BackboneConfig backbone;
  std::array<int, 3> dilation_rates = kDefaultDilationRates;

  // Loss
  double epsilon = 1.2;
  double margin = 0.2;
  double suppress_ratio = 0.25;
  BetaSource beta_source = BetaSource::predicted;
  bool allow_epsilon_below_one = false;  // only for sensitivity sweeps
  bool batch_mean_loss = true;           // divide the summed loss by N

  // Retrieval optimisation
  double learning_rate = 0.002;  // desk scale; paper_scale restores 0.0002
  int batch_size = 32;
  int epochs = 15;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;

  // Classifier phase
  BackboneConfig classifier_backbone{32, {2, 2, 2, 1}};
  double classifier_learning_rate = 0.003;
  int classifier_batch_size = 8;
  int classifier_epochs = 15;
  ClassificationLossKind classification_loss = ClassificationLossKind::softmax_cross_entropy;

  // Ablation flags
  bool use_bsd = true;
  bool use_lsd = true;
  bool use_stl = true;
  DirectionMode direction = DirectionMode::both;
  AttentionMode attention = AttentionMode::bsd;
  FusionMode fusion = FusionMode::multiply;

  // Optional path to the frozen classifier checkpoint.
  std::string classifiers;

  // Attention mode actually used by the image branch (none when use_bsd is off).
  AttentionMode effective_attention() const { return use_bsd ? attention : AttentionMode::none; }
};

// Values of the full-size setting: d'=512, batch 100, 70 epochs.
Config paper_scale(Config base);

// Throws Error describing the first violated constraint.
void validate_config(const Config& config);

nlohmann::json config_to_json(const Config& config);
// Missing fields keep the value from base; unknown fields are rejected.
Config config_from_json(const nlohmann::json& j, const Config& base = Config{});
Config load_config(const std::filesystem::path& path);
void save_config(const Config& config, const std::filesystem::path& path);
// Stable hex digest of the serialized config.
std::string config_fingerprint(const Config& config);

// Adam with per-parameter state keyed by visitor path.
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  // Applies one update to every visited parameter and zeroes its gradient.
  template <typename Module>
  void step(Module& module, const std::string& prefix) {
    ++t_;
    module.visit(prefix, [this](const std::string& path, Param<float>& p) { update(path, p); });
  }

 private:
  void update(const std::string& path, Param<float>& p);

  struct Moments {
    std::vector<double> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

// Frozen-after-phase-1 category classifiers and the vocabulary they were
// trained with.
struct ClassifierState {
  Config config;
  Vocabulary vocab;
  int num_categories = 0;
  ImageClassifier<float> image;
  TextClassifier<float> text;
  int epoch = 0;
  nlohmann::json history = nlohmann::json::array();

  ClassifierState() = default;
  ClassifierState(const Config& config, Vocabulary vocab, int num_categories);

  void visit(const ParamVisitor<float>& visitor);
};

struct ImageForward {
  Backbone<float>::Cache backbone;
  Aspp<float>::Cache aspp;
  ScaleDecoupling<float>::Cache decoupling;
};

class RetrievalModel {
 public:
  RetrievalModel() = default;
  RetrievalModel(const Config& config, int vocab_size);

  // Un-fused image embedding (d'), optionally with the decoupling passes.
  std::vector<float> embed_image(const Image& image, ImageForward* cache,
                                 ScaleDecoupling<float>::Output* details = nullptr) const;
  void backward_image(const ImageForward& cache, std::span<const float> grad);

  std::vector<float> embed_text(std::span<const int> tokens, int length, TextEncoder<float>::Cache* cache) const;
  void backward_text(const TextEncoder<float>::Cache& cache, std::span<const float> grad);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor<float>& visitor);

 private:
  Backbone<float> backbone_;
  Aspp<float> aspp_;
  ScaleDecoupling<float> decoupling_;
  TextEncoder<float> text_;
};

struct RetrievalState {
  Config config;
  ClassifierState classifiers;
  RetrievalModel model;
  int epoch = 0;
  nlohmann::json history = nlohmann::json::array();

  RetrievalState() = default;
  RetrievalState(const Config& config, ClassifierState classifiers);

  const Vocabulary& vocab() const { return classifiers.vocab; }
  int num_categories() const { return classifiers.num_categories; }

  // Final (category-fused when LSD is on) embeddings.
  std::vector<float> image_embedding(const Image& image) const;
  std::vector<float> text_embedding(const std::string& caption) const;
};

// Images are fed to the networks centred on zero.
Tensor3<float> prepare_image(const Image& image);

// Aborted training run; last_good holds the serialized checkpoint from before
// the failing batch.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, nlohmann::json last_good)
      : Error(what), last_good_(std::move(last_good)) {}
  const nlohmann::json& last_good() const { return last_good_; }

 private:
  nlohmann::json last_good_;
};

struct ClassifierAccuracy {
  double image = 0.0;
  double text = 0.0;  // over all captions
};

ClassifierAccuracy classifier_accuracy(const ClassifierState& state, const Dataset& dataset);

// Phase 1. The vocabulary is built from the training captions.
ClassifierState train_classifiers(const Dataset& train, const Config& config, std::ostream* log = nullptr);

// Phase 2 with frozen classifiers. val (optional) is evaluated after each
// epoch and logged.
RetrievalState train_retrieval(const Dataset& train, const ClassifierState& classifiers, const Config& config,
                               const Dataset* val = nullptr, std::ostream* log = nullptr);

struct EmbeddedSplit {
  std::vector<std::vector<float>> images;
  std::vector<std::vector<float>> texts;  // caption k of image i at i*5+k
  GroundTruth ground_truth;
};

EmbeddedSplit embed_dataset(const RetrievalState& state, const Dataset& dataset);
RetrievalReport evaluate(const RetrievalState& state, const Dataset& dataset);

// Checkpoints (CBOR). Parameters are stored by visitor path.
nlohmann::json classifiers_to_json(ClassifierState& state);
ClassifierState classifiers_from_json(const nlohmann::json& j);
nlohmann::json retrieval_to_json(RetrievalState& state);
RetrievalState retrieval_from_json(const nlohmann::json& j);

void write_checkpoint(const nlohmann::json& j, const std::filesystem::path& path);
nlohmann::json read_checkpoint(const std::filesystem::path& path);

void save_classifiers(ClassifierState& state, const std::filesystem::path& path);
ClassifierState load_classifiers(const std::filesystem::path& path);
void save_retrieval(RetrievalState& state, const std::filesystem::path& path);
RetrievalState load_retrieval(const std::filesystem::path& path);

// Named ablation variants: full, w/o-bsd, w/o-lsd, w/o-stl, w/o-all,
// usd-l2s, usd-s2l, ma, w/o-ma, eps-<value>, fusion-add, fusion-concat,
// fusion-multiply.
Config apply_variant(Config base, const std::string& variant);
std::vector<std::string> known_variants();

struct VariantResult {
  std::string variant;
  std::vector<std::uint64_t> seeds;
  std::vector<RetrievalReport> reports;  // one per seed

  double median_mR() const;
};

struct AblationOptions {
  std::vector<std::string> variants;
  int seeds = 3;
  std::ostream* log = nullptr;
};

// Trains each variant once per seed (seed = base.seed + s) and evaluates on
// eval. Classifiers are trained once per seed and shared across variants.
std::vector<VariantResult> run_ablation(const Dataset& train, const Dataset& eval, const Config& base,
                                        const AblationOptions& options);

nlohmann::json ablation_to_json(const std::vector<VariantResult>& results);
std::string ablation_table(const std::vector<VariantResult>& results);

// Writes attention maps and suppression masks for one image as grayscale PNGs
// upsampled to the input size. Returns the written paths.
std::vector<std::filesystem::path> export_attention(const RetrievalState& state, const Image& image,
                                                    const std::filesystem::path& out_dir);

}  // namespace ssjdn
