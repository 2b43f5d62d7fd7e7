#include "ssjdn/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

namespace ssjdn {

using nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string_view loss_kind_name(ClassificationLossKind k) {
  return k == ClassificationLossKind::softmax_cross_entropy ? "softmax" : "binary";
}

ClassificationLossKind parse_loss_kind(const std::string& s) {
  if (s == "softmax") return ClassificationLossKind::softmax_cross_entropy;
  if (s == "binary") return ClassificationLossKind::binary_cross_entropy;
  throw Error("unknown classification_loss '" + s + "' (expected softmax or binary)");
}

json backbone_json(const BackboneConfig& b) { return {{"channels", b.channels}, {"strides", b.strides}}; }

BackboneConfig backbone_from(const json& j, BackboneConfig base) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "channels") base.channels = it->get<int>();
    else if (it.key() == "strides") base.strides = it->get<std::vector<int>>();
    else throw Error("unknown backbone field '" + it.key() + "'");
  }
  return base;
}

bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

Config paper_scale(Config base) {
  base.embed_dim = 512;
  base.batch_size = 100;
  base.epochs = 70;
  base.learning_rate = 0.0002;
  return base;
}

void validate_config(const Config& c) {
  if (c.allow_epsilon_below_one) {
    if (!(c.epsilon > 0.0)) throw Error("config: epsilon must be positive");
  } else if (!(c.epsilon >= 1.0)) {
    throw Error("config: epsilon must be >= 1");
  }
  if (!(c.suppress_ratio > 0.0 && c.suppress_ratio < 1.0)) throw Error("config: suppress_ratio must be in (0,1)");
  if (!(c.margin >= 0.0)) throw Error("config: margin must be >= 0");
  if (!(c.learning_rate >= 0.0) || !(c.classifier_learning_rate >= 0.0)) {
    throw Error("config: learning rates must be >= 0");
  }
  if (c.batch_size < 1 || c.classifier_batch_size < 1) throw Error("config: batch sizes must be >= 1");
  if (c.epochs < 0 || c.classifier_epochs < 0) throw Error("config: epochs must be >= 0");
  if (c.embed_dim < 1 || c.word_dim < 1) throw Error("config: embedding sizes must be >= 1");
  if (c.max_caption_len < 1) throw Error("config: max_caption_len must be >= 1");
  if (c.min_token_count < 1) throw Error("config: min_token_count must be >= 1");
  if (!(c.val_fraction >= 0.0 && c.val_fraction < 1.0)) throw Error("config: val_fraction must be in [0,1)");
  for (const auto* b : {&c.backbone, &c.classifier_backbone}) {
    if (b->channels < 1 || b->strides.empty()) throw Error("config: backbone needs channels and strides");
    for (int s : b->strides) {
      if (s < 1) throw Error("config: backbone strides must be >= 1");
    }
  }
  for (int m = 0; m < 3; ++m) {
    if (c.dilation_rates[m] < 1 || (m > 0 && c.dilation_rates[m] <= c.dilation_rates[m - 1])) {
      throw Error("config: dilation_rates must be positive and ascending");
    }
  }
  if (c.direction != DirectionMode::both && c.effective_attention() != AttentionMode::bsd) {
    throw Error("config: a single direction only applies to bsd attention");
  }
}

json config_to_json(const Config& c) {
  return {
      {"embed_dim", c.embed_dim},
      {"word_dim", c.word_dim},
      {"max_caption_len", c.max_caption_len},
      {"min_token_count", c.min_token_count},
      {"backbone", backbone_json(c.backbone)},
      {"dilation_rates", c.dilation_rates},
      {"epsilon", c.epsilon},
      {"margin", c.margin},
      {"suppress_ratio", c.suppress_ratio},
      {"beta_source", c.beta_source == BetaSource::predicted ? "predicted" : "ground_truth"},
      {"allow_epsilon_below_one", c.allow_epsilon_below_one},
      {"batch_mean_loss", c.batch_mean_loss},
      {"learning_rate", c.learning_rate},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"seed", c.seed},
      {"val_fraction", c.val_fraction},
      {"classifier_backbone", backbone_json(c.classifier_backbone)},
      {"classifier_learning_rate", c.classifier_learning_rate},
      {"classifier_batch_size", c.classifier_batch_size},
      {"classifier_epochs", c.classifier_epochs},
      {"classification_loss", loss_kind_name(c.classification_loss)},
      {"use_bsd", c.use_bsd},
      {"use_lsd", c.use_lsd},
      {"use_stl", c.use_stl},
      {"direction", to_string(c.direction)},
      {"attention", to_string(c.attention)},
      {"fusion", to_string(c.fusion)},
      {"classifiers", c.classifiers},
  };
}

Config config_from_json(const json& j, const Config& base) {
  if (!j.is_object()) throw Error("config must be a JSON object");
  Config c = base;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = *it;
    try {
      if (k == "embed_dim") c.embed_dim = v.get<int>();
      else if (k == "word_dim") c.word_dim = v.get<int>();
      else if (k == "max_caption_len") c.max_caption_len = v.get<int>();
      else if (k == "min_token_count") c.min_token_count = v.get<int>();
      else if (k == "backbone") c.backbone = backbone_from(v, c.backbone);
      else if (k == "dilation_rates") c.dilation_rates = v.get<std::array<int, 3>>();
      else if (k == "epsilon") c.epsilon = v.get<double>();
      else if (k == "margin") c.margin = v.get<double>();
      else if (k == "suppress_ratio") c.suppress_ratio = v.get<double>();
      else if (k == "beta_source") {
        const auto s = v.get<std::string>();
        if (s == "predicted") c.beta_source = BetaSource::predicted;
        else if (s == "ground_truth") c.beta_source = BetaSource::ground_truth;
        else throw Error("beta_source must be predicted or ground_truth");
      } else if (k == "allow_epsilon_below_one") c.allow_epsilon_below_one = v.get<bool>();
      else if (k == "batch_mean_loss") c.batch_mean_loss = v.get<bool>();
      else if (k == "learning_rate") c.learning_rate = v.get<double>();
      else if (k == "batch_size") c.batch_size = v.get<int>();
      else if (k == "epochs") c.epochs = v.get<int>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "val_fraction") c.val_fraction = v.get<double>();
      else if (k == "classifier_backbone") c.classifier_backbone = backbone_from(v, c.classifier_backbone);
      else if (k == "classifier_learning_rate") c.classifier_learning_rate = v.get<double>();
      else if (k == "classifier_batch_size") c.classifier_batch_size = v.get<int>();
      else if (k == "classifier_epochs") c.classifier_epochs = v.get<int>();
      else if (k == "classification_loss") c.classification_loss = parse_loss_kind(v.get<std::string>());
      else if (k == "use_bsd") c.use_bsd = v.get<bool>();
      else if (k == "use_lsd") c.use_lsd = v.get<bool>();
      else if (k == "use_stl") c.use_stl = v.get<bool>();
      else if (k == "direction") c.direction = parse_direction_mode(v.get<std::string>());
      else if (k == "attention") c.attention = parse_attention_mode(v.get<std::string>());
      else if (k == "fusion") c.fusion = parse_fusion_mode(v.get<std::string>());
      else if (k == "classifiers") c.classifiers = v.get<std::string>();
      else throw Error("unknown field");
    } catch (const json::exception& e) {
      throw Error("config field '" + k + "': " + e.what());
    } catch (const Error& e) {
      throw Error("config field '" + k + "': " + e.what());
    }
  }
  return c;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("config " + path.string() + ": " + e.what());
  }
  Config c = config_from_json(j);
  validate_config(c);
  return c;
}

void save_config(const Config& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write config " + path.string());
  out << config_to_json(config).dump(2) << "\n";
}

std::string config_fingerprint(const Config& config) {
  json j = config_to_json(config);
  j.erase("classifiers");  // a file location, not a setting
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::update(const std::string& path, Param<float>& p) {
  auto& s = state_[path];
  if (s.m.size() != p.size()) {
    s.m.assign(p.size(), 0.0);
    s.v.assign(p.size(), 0.0);
  }
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double g = p.grad[i];
    s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g;
    s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g * g;
    const double step = lr_ * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
    p.value[i] = static_cast<float>(p.value[i] - step);
  }
  p.zero_grad();
}

// ---------------------------------------------------------------------------
// Models

ClassifierState::ClassifierState(const Config& cfg, Vocabulary v, int c)
    : config(cfg),
      vocab(std::move(v)),
      num_categories(c),
      image(cfg.classifier_backbone, cfg.embed_dim, c),
      text(vocab.size(), cfg.word_dim, cfg.embed_dim, c) {}

void ClassifierState::visit(const ParamVisitor<float>& visitor) {
  image.visit("image", visitor);
  text.visit("text", visitor);
}

RetrievalModel::RetrievalModel(const Config& config, int vocab_size)
    : backbone_(config.backbone),
      aspp_(config.backbone.channels, config.dilation_rates),
      decoupling_(ScaleDecouplingConfig{config.effective_attention(), config.direction, config.suppress_ratio},
                  config.backbone.channels, config.embed_dim),
      text_(vocab_size, config.word_dim, config.embed_dim) {}

Tensor3<float> prepare_image(const Image& image) {
  Tensor3<float> out = image;
  for (auto& v : out.data) v = 2.0f * v - 1.0f;
  return out;
}

std::vector<float> RetrievalModel::embed_image(const Image& image, ImageForward* cache,
                                               ScaleDecoupling<float>::Output* details) const {
  const auto global = backbone_.forward(prepare_image(image), cache ? &cache->backbone : nullptr);
  const auto scales = aspp_.forward(global, cache ? &cache->aspp : nullptr);
  auto out = decoupling_.forward(scales, cache ? &cache->decoupling : nullptr);
  auto embedding = std::move(out.embedding);
  if (details) *details = std::move(out);
  return embedding;
}

void RetrievalModel::backward_image(const ImageForward& cache, std::span<const float> grad) {
  std::array<Tensor3<float>, 3> grad_scales;
  decoupling_.backward(cache.decoupling, grad, &grad_scales);
  Tensor3<float> grad_global;
  aspp_.backward(cache.aspp, grad_scales, &grad_global);
  backbone_.backward(cache.backbone, grad_global, nullptr);
}

std::vector<float> RetrievalModel::embed_text(std::span<const int> tokens, int length,
                                              TextEncoder<float>::Cache* cache) const {
  return text_.forward(tokens, length, cache);
}

void RetrievalModel::backward_text(const TextEncoder<float>::Cache& cache, std::span<const float> grad) {
  text_.backward(cache, grad);
}

void RetrievalModel::init(std::mt19937_64& rng) {
  backbone_.init(rng);
  aspp_.init(rng);
  decoupling_.init(rng);
  text_.init(rng);
}

void RetrievalModel::visit(const std::string& prefix, const ParamVisitor<float>& visitor) {
  const std::string p = prefix.empty() ? "" : prefix + ".";
  backbone_.visit(p + "backbone", visitor);
  aspp_.visit(p + "aspp", visitor);
  decoupling_.visit(p + "decoupling", visitor);
  text_.visit(p + "text", visitor);
}

RetrievalState::RetrievalState(const Config& cfg, ClassifierState cls)
    : config(cfg), classifiers(std::move(cls)), model(cfg, classifiers.vocab.size()) {}

namespace {

std::vector<float> fuse_or_pass(std::vector<float> embedding, const std::vector<float>& category,
                                const Config& config) {
  if (!config.use_lsd) return embedding;
  return fuse_category<float>(embedding, category, config.fusion);
}

}  // namespace

std::vector<float> RetrievalState::image_embedding(const Image& image) const {
  auto emb = model.embed_image(image, nullptr);
  if (!config.use_lsd) return emb;
  const auto pred = classifiers.image.forward(prepare_image(image), nullptr);
  return fuse_or_pass(std::move(emb), pred.feature, config);
}

std::vector<float> RetrievalState::text_embedding(const std::string& caption) const {
  const auto enc = encode_caption(caption, vocab(), config.max_caption_len);
  auto emb = model.embed_text(enc.tokens, enc.length, nullptr);
  if (!config.use_lsd) return emb;
  const auto pred = classifiers.text.forward(enc.tokens, enc.length, nullptr);
  return fuse_or_pass(std::move(emb), pred.feature, config);
}

// ---------------------------------------------------------------------------
// Phase 1

ClassifierAccuracy classifier_accuracy(const ClassifierState& state, const Dataset& dataset) {
  ClassifierAccuracy acc;
  if (dataset.samples.empty()) return acc;
  std::vector<unsigned char> image_ok(dataset.size()), text_ok(dataset.size() * kCaptionsPerImage);
  parallel_for(dataset.size(), [&](std::size_t i) {
    const auto& s = dataset.samples[i];
    image_ok[i] = state.image.forward(prepare_image(s.image), nullptr).predicted == s.category;
    for (int k = 0; k < kCaptionsPerImage; ++k) {
      const auto enc = encode_caption(s.captions[k], state.vocab, state.config.max_caption_len);
      text_ok[i * kCaptionsPerImage + k] = state.text.forward(enc.tokens, enc.length, nullptr).predicted == s.category;
    }
  });
  acc.image = std::accumulate(image_ok.begin(), image_ok.end(), 0.0) / static_cast<double>(image_ok.size());
  acc.text = std::accumulate(text_ok.begin(), text_ok.end(), 0.0) / static_cast<double>(text_ok.size());
  return acc;
}

ClassifierState train_classifiers(const Dataset& train, const Config& config, std::ostream* log) {
  validate_config(config);
  validate_dataset(train);
  if (train.samples.empty()) throw Error("train_classifiers: empty dataset");
  ClassifierState state(config, build_vocabulary(train.all_captions(), config.min_token_count),
                        train.num_categories);
  std::mt19937_64 init_rng(mix(config.seed, 1));
  state.image.init(init_rng);
  state.text.init(init_rng);

  std::vector<EncodedCaption> captions;
  std::vector<int> caption_labels;
  for (const auto& s : train.samples) {
    for (const auto& c : s.captions) {
      captions.push_back(encode_caption(c, state.vocab, config.max_caption_len));
      caption_labels.push_back(s.category);
    }
  }
  std::vector<Tensor3<float>> images;
  images.reserve(train.size());
  for (const auto& s : train.samples) images.push_back(prepare_image(s.image));

  Adam image_opt(config.classifier_learning_rate), text_opt(config.classifier_learning_rate);
  const int batch = config.classifier_batch_size;
  for (int epoch = 0; epoch < config.classifier_epochs; ++epoch) {
    const json last_good = classifiers_to_json(state);
    std::mt19937_64 rng(mix(config.seed, 1000 + static_cast<std::uint64_t>(epoch)));

    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double image_loss = 0.0;
    std::size_t image_correct = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      const float scale = 1.0f / static_cast<float>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const auto idx = order[b];
        ImageClassifier<float>::Cache cache;
        const auto pred = state.image.forward(images[idx], &cache);
        const auto lg = classification_loss<float>(pred.logits, train.samples[idx].category,
                                                   config.classification_loss);
        if (!std::isfinite(lg.loss)) {
          throw DivergenceError("image classifier loss is not finite at epoch " + std::to_string(epoch) +
                                    ", sample " + train.samples[idx].id,
                                last_good);
        }
        image_loss += lg.loss;
        image_correct += pred.predicted == train.samples[idx].category;
        std::vector<float> g(lg.grad.size());
        for (std::size_t k = 0; k < g.size(); ++k) g[k] = static_cast<float>(lg.grad[k]) * scale;
        state.image.backward(cache, g);
      }
      image_opt.step(state.image, "image");
    }

    std::vector<std::size_t> text_order(captions.size());
    std::iota(text_order.begin(), text_order.end(), 0);
    std::shuffle(text_order.begin(), text_order.end(), rng);
    double text_loss = 0.0;
    std::size_t text_correct = 0;
    for (std::size_t start = 0; start < text_order.size(); start += batch) {
      const std::size_t end = std::min(text_order.size(), start + batch);
      const float scale = 1.0f / static_cast<float>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const auto idx = text_order[b];
        TextClassifier<float>::Cache cache;
        const auto pred = state.text.forward(captions[idx].tokens, captions[idx].length, &cache);
        const auto lg = classification_loss<float>(pred.logits, caption_labels[idx], config.classification_loss);
        if (!std::isfinite(lg.loss)) {
          throw DivergenceError("text classifier loss is not finite at epoch " + std::to_string(epoch) +
                                    ", caption " + std::to_string(idx),
                                last_good);
        }
        text_loss += lg.loss;
        text_correct += pred.predicted == caption_labels[idx];
        std::vector<float> g(lg.grad.size());
        for (std::size_t k = 0; k < g.size(); ++k) g[k] = static_cast<float>(lg.grad[k]) * scale;
        state.text.backward(cache, g);
      }
      text_opt.step(state.text, "text");
    }

    state.epoch = epoch + 1;
    json entry = {{"epoch", epoch + 1},
                  {"image_loss", image_loss / static_cast<double>(images.size())},
                  {"text_loss", text_loss / static_cast<double>(captions.size())},
                  {"image_running_accuracy", static_cast<double>(image_correct) / images.size()},
                  {"text_running_accuracy", static_cast<double>(text_correct) / captions.size()}};
    state.history.push_back(entry);
    if (log) {
      *log << "classifiers epoch " << epoch + 1 << " image_loss " << entry["image_loss"].get<double>()
           << " image_acc " << entry["image_running_accuracy"].get<double>() << " text_loss "
           << entry["text_loss"].get<double>() << " text_acc " << entry["text_running_accuracy"].get<double>()
           << "\n";
    }
  }
  return state;
}

// ---------------------------------------------------------------------------
// Phase 2

namespace {

struct FrozenCategory {
  std::vector<float> feature;
  int predicted = 0;
};

}  // namespace

RetrievalState train_retrieval(const Dataset& train, const ClassifierState& classifiers, const Config& config,
                               const Dataset* val, std::ostream* log) {
  validate_config(config);
  validate_dataset(train);
  if (classifiers.num_categories != train.num_categories) {
    throw Error("classifier checkpoint has " + std::to_string(classifiers.num_categories) +
                " categories but the dataset has " + std::to_string(train.num_categories));
  }
  if (config.use_lsd && classifiers.config.embed_dim != config.embed_dim) {
    throw Error("classifier feature size " + std::to_string(classifiers.config.embed_dim) +
                " does not match embed_dim " + std::to_string(config.embed_dim));
  }
  if (train.samples.empty()) throw Error("train_retrieval: empty dataset");

  RetrievalState state(config, classifiers);
  std::mt19937_64 init_rng(mix(config.seed, 2));
  state.model.init(init_rng);

  // Frozen classifier outputs, computed once.
  const std::size_t n = train.size();
  std::vector<Tensor3<float>> images(n);
  std::vector<FrozenCategory> image_cat(n);
  std::vector<EncodedCaption> captions(n * kCaptionsPerImage);
  std::vector<FrozenCategory> text_cat(n * kCaptionsPerImage);
  parallel_for(n, [&](std::size_t i) {
    const auto& s = train.samples[i];
    images[i] = prepare_image(s.image);
    auto p = classifiers.image.forward(images[i], nullptr);
    image_cat[i] = {std::move(p.feature), p.predicted};
    for (int k = 0; k < kCaptionsPerImage; ++k) {
      const std::size_t j = i * kCaptionsPerImage + k;
      captions[j] = encode_caption(s.captions[k], classifiers.vocab, config.max_caption_len);
      auto q = classifiers.text.forward(captions[j].tokens, captions[j].length, nullptr);
      text_cat[j] = {std::move(q.feature), q.predicted};
    }
  });

  Adam opt(config.learning_rate);
  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const json last_good = retrieval_to_json(state);
    std::mt19937_64 rng(mix(config.seed, 2000 + static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> pick(n);
    std::uniform_int_distribution<int> caption_dist(0, kCaptionsPerImage - 1);
    for (auto& k : pick) k = caption_dist(rng);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(n, start + batch);
      const std::size_t m = end - start;
      const std::size_t batch_index = batches;
      auto fail = [&](const std::string& what) {
        throw DivergenceError("retrieval training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(batch_index) + ": " + what,
                              last_good);
      };

      std::vector<ImageForward> icache(m);
      std::vector<TextEncoder<float>::Cache> tcache(m);
      std::vector<std::vector<float>> fi(m), ft(m);
      std::vector<int> qu(m), qv(m);
      std::vector<std::size_t> cap_idx(m);
      for (std::size_t b = 0; b < m; ++b) {
        const std::size_t i = order[start + b];
        const std::size_t j = i * kCaptionsPerImage + static_cast<std::size_t>(pick[i]);
        cap_idx[b] = j;
        auto ie = state.model.embed_image(train.samples[i].image, &icache[b]);
        auto te = state.model.embed_text(captions[j].tokens, captions[j].length, &tcache[b]);
        if (!all_finite(ie)) fail("image embedding is not finite");
        if (!all_finite(te)) fail("text embedding is not finite");
        fi[b] = fuse_or_pass(std::move(ie), image_cat[i].feature, config);
        ft[b] = fuse_or_pass(std::move(te), text_cat[j].feature, config);
        if (config.beta_source == BetaSource::predicted) {
          qu[b] = image_cat[i].predicted;
          qv[b] = text_cat[j].predicted;
        } else {
          qu[b] = qv[b] = train.samples[i].category;
        }
      }

      Matrix s(m, m);
      try {
        for (std::size_t a = 0; a < m; ++a) {
          for (std::size_t b = 0; b < m; ++b) s(a, b) = similarity<float>(fi[a], ft[b]);
        }
      } catch (const Error& e) {
        fail(std::string("similarity term: ") + e.what());
      }
      Matrix grad;
      double loss = 0.0;
      if (config.use_stl) {
        const auto beta = beta_matrix(qu, qv, config.epsilon, config.allow_epsilon_below_one);
        loss = semantic_triplet_loss(s, beta, config.margin, &grad);
      } else {
        loss = triplet_loss(s, config.margin, &grad);
      }
      const double norm = config.batch_mean_loss ? 1.0 / static_cast<double>(m) : 1.0;
      loss *= norm;
      if (!std::isfinite(loss)) fail(config.use_stl ? "semantic triplet loss term" : "triplet loss term");
      loss_sum += loss;
      ++batches;

      std::vector<std::vector<float>> gfi(m), gft(m);
      for (std::size_t b = 0; b < m; ++b) {
        gfi[b].assign(fi[b].size(), 0.0f);
        gft[b].assign(ft[b].size(), 0.0f);
      }
      for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t b = 0; b < m; ++b) {
          const double g = grad(a, b) * norm;
          if (g != 0.0) similarity_backward<float>(fi[a], ft[b], g, gfi[a], gft[b]);
        }
      }
      for (std::size_t b = 0; b < m; ++b) {
        const std::size_t i = order[start + b];
        const std::size_t j = cap_idx[b];
        const auto gi = config.use_lsd ? fuse_category_backward<float>(gfi[b], image_cat[i].feature, config.fusion)
                                       : gfi[b];
        const auto gt = config.use_lsd ? fuse_category_backward<float>(gft[b], text_cat[j].feature, config.fusion)
                                       : gft[b];
        state.model.backward_image(icache[b], gi);
        state.model.backward_text(tcache[b], gt);
      }
      opt.step(state.model, "");
    }

    state.epoch = epoch + 1;
    json entry = {{"epoch", epoch + 1}, {"loss", batches ? loss_sum / static_cast<double>(batches) : 0.0}};
    if (val && val->size() >= 10) {
      const auto report = evaluate(state, *val);
      entry["val_mR"] = report.mR;
    }
    state.history.push_back(entry);
    if (log) {
      *log << "retrieval epoch " << epoch + 1 << " loss " << entry["loss"].get<double>();
      if (entry.contains("val_mR")) *log << " val_mR " << entry["val_mR"].get<double>();
      *log << "\n";
    }
  }
  return state;
}

EmbeddedSplit embed_dataset(const RetrievalState& state, const Dataset& dataset) {
  validate_dataset(dataset);
  EmbeddedSplit out;
  out.images.resize(dataset.size());
  out.texts.resize(dataset.size() * kCaptionsPerImage);
  parallel_for(dataset.size(), [&](std::size_t i) {
    const auto& s = dataset.samples[i];
    out.images[i] = state.image_embedding(s.image);
    for (int k = 0; k < kCaptionsPerImage; ++k) out.texts[i * kCaptionsPerImage + k] = state.text_embedding(s.captions[k]);
  });
  out.ground_truth = contiguous_ground_truth(dataset.size(), kCaptionsPerImage);
  return out;
}

RetrievalReport evaluate(const RetrievalState& state, const Dataset& dataset) {
  if (dataset.num_categories != state.num_categories()) {
    throw Error("checkpoint has " + std::to_string(state.num_categories()) + " categories but the dataset has " +
                std::to_string(dataset.num_categories));
  }
  const auto split = embed_dataset(state, dataset);
  return compute_report(similarity_matrix(split.images, split.texts), split.ground_truth);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

template <typename Visit>
json params_to_json(Visit&& visit) {
  json params = json::object();
  visit([&](const std::string& path, Param<float>& p) {
    params[path] = {{"shape", p.shape}, {"values", p.value}};
  });
  return params;
}

template <typename Visit>
void params_from_json(const json& params, Visit&& visit) {
  std::set<std::string> seen;
  visit([&](const std::string& path, Param<float>& p) {
    if (!params.contains(path)) throw Error("checkpoint is missing parameter " + path);
    const auto& entry = params.at(path);
    if (entry.at("shape").get<std::vector<int>>() != p.shape) throw Error("checkpoint shape mismatch for " + path);
    auto values = entry.at("values").get<std::vector<float>>();
    if (values.size() != p.size()) throw Error("checkpoint size mismatch for " + path);
    p.value = std::move(values);
    p.zero_grad();
    seen.insert(path);
  });
  for (auto it = params.begin(); it != params.end(); ++it) {
    if (!seen.count(it.key())) throw Error("checkpoint has unexpected parameter " + it.key());
  }
}

Vocabulary vocab_from_tokens(const std::vector<std::string>& tokens) {
  Vocabulary v;
  if (tokens.size() < 2 || tokens[0] != Vocabulary::kPadToken || tokens[1] != Vocabulary::kUnknownToken) {
    throw Error("checkpoint vocabulary lacks the special tokens");
  }
  for (std::size_t i = 2; i < tokens.size(); ++i) v.add(tokens[i]);
  return v;
}

void check_kind(const json& j, const std::string& kind) {
  if (!j.is_object() || !j.contains("kind") || j.at("kind") != kind) {
    throw Error("not a " + kind + " checkpoint");
  }
}

}  // namespace

json classifiers_to_json(ClassifierState& state) {
  return {{"kind", "classifiers"},
          {"config", config_to_json(state.config)},
          {"fingerprint", config_fingerprint(state.config)},
          {"vocabulary", state.vocab.tokens()},
          {"num_categories", state.num_categories},
          {"epoch", state.epoch},
          {"history", state.history},
          {"params", params_to_json([&](const ParamVisitor<float>& v) { state.visit(v); })}};
}

ClassifierState classifiers_from_json(const json& j) {
  check_kind(j, "classifiers");
  try {
    const Config config = config_from_json(j.at("config"));
    ClassifierState state(config, vocab_from_tokens(j.at("vocabulary").get<std::vector<std::string>>()),
                          j.at("num_categories").get<int>());
    state.epoch = j.at("epoch").get<int>();
    state.history = j.at("history");
    params_from_json(j.at("params"), [&](const ParamVisitor<float>& v) { state.visit(v); });
    return state;
  } catch (const json::exception& e) {
    throw Error(std::string("malformed classifier checkpoint: ") + e.what());
  }
}

json retrieval_to_json(RetrievalState& state) {
  return {{"kind", "retrieval"},
          {"config", config_to_json(state.config)},
          {"fingerprint", config_fingerprint(state.config)},
          {"epoch", state.epoch},
          {"history", state.history},
          {"classifiers", classifiers_to_json(state.classifiers)},
          {"params", params_to_json([&](const ParamVisitor<float>& v) { state.model.visit("", v); })}};
}

RetrievalState retrieval_from_json(const json& j) {
  check_kind(j, "retrieval");
  try {
    const Config config = config_from_json(j.at("config"));
    RetrievalState state(config, classifiers_from_json(j.at("classifiers")));
    state.epoch = j.at("epoch").get<int>();
    state.history = j.at("history");
    params_from_json(j.at("params"), [&](const ParamVisitor<float>& v) { state.model.visit("", v); });
    return state;
  } catch (const json::exception& e) {
    throw Error(std::string("malformed retrieval checkpoint: ") + e.what());
  }
}

void write_checkpoint(const json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = json::to_cbor(j);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

json read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return json::from_cbor(bytes);
  } catch (const json::exception& e) {
    throw Error("checkpoint " + path.string() + " is not valid: " + e.what());
  }
}

void save_classifiers(ClassifierState& state, const std::filesystem::path& path) {
  write_checkpoint(classifiers_to_json(state), path);
}
ClassifierState load_classifiers(const std::filesystem::path& path) { return classifiers_from_json(read_checkpoint(path)); }
void save_retrieval(RetrievalState& state, const std::filesystem::path& path) {
  write_checkpoint(retrieval_to_json(state), path);
}
RetrievalState load_retrieval(const std::filesystem::path& path) { return retrieval_from_json(read_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Ablation

std::vector<std::string> known_variants() {
  return {"full",     "w/o-bsd", "w/o-lsd", "w/o-stl",    "w/o-all",       "usd-l2s",        "usd-s2l",
          "ma",       "w/o-ma",  "eps-<x>", "fusion-add", "fusion-concat", "fusion-multiply"};
}

Config apply_variant(Config c, const std::string& v) {
  if (v == "full") {
    c.use_bsd = c.use_lsd = c.use_stl = true;
    c.attention = AttentionMode::bsd;
    c.direction = DirectionMode::both;
    c.fusion = FusionMode::multiply;
  } else if (v == "w/o-bsd") {
    c.use_bsd = false;
    c.direction = DirectionMode::both;
  } else if (v == "w/o-lsd") {
    c.use_lsd = false;
  } else if (v == "w/o-stl") {
    c.use_stl = false;
  } else if (v == "w/o-all") {
    c.use_bsd = c.use_lsd = c.use_stl = false;
    c.direction = DirectionMode::both;
  } else if (v == "usd-l2s") {
    c.direction = DirectionMode::large_to_small;
  } else if (v == "usd-s2l") {
    c.direction = DirectionMode::small_to_large;
  } else if (v == "ma") {
    c.attention = AttentionMode::ma;
    c.direction = DirectionMode::both;
  } else if (v == "w/o-ma") {
    c.attention = AttentionMode::none;
    c.direction = DirectionMode::both;
  } else if (v.rfind("eps-", 0) == 0) {
    std::size_t used = 0;
    double eps = 0.0;
    try {
      eps = std::stod(v.substr(4), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != v.size() - 4) throw Error("bad epsilon in variant '" + v + "'");
    c.epsilon = eps;
    c.allow_epsilon_below_one = eps < 1.0;
  } else if (v.rfind("fusion-", 0) == 0) {
    c.fusion = parse_fusion_mode(v.substr(7));
  } else {
    std::string list;
    for (const auto& k : known_variants()) list += (list.empty() ? "" : ", ") + k;
    throw Error("unknown variant '" + v + "' (known: " + list + ")");
  }
  validate_config(c);
  return c;
}

double VariantResult::median_mR() const {
  if (reports.empty()) return 0.0;
  std::vector<double> v;
  for (const auto& r : reports) v.push_back(r.mR);
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

std::vector<VariantResult> run_ablation(const Dataset& train, const Dataset& eval, const Config& base,
                                        const AblationOptions& options) {
  if (options.seeds < 1) throw Error("ablation needs at least one seed");
  std::vector<Config> configs;
  for (const auto& v : options.variants) configs.push_back(apply_variant(base, v));
  std::vector<VariantResult> results(options.variants.size());
  for (std::size_t v = 0; v < results.size(); ++v) results[v].variant = options.variants[v];
  for (int s = 0; s < options.seeds; ++s) {
    Config seed_base = base;
    seed_base.seed = base.seed + static_cast<std::uint64_t>(s);
    const auto classifiers = train_classifiers(train, seed_base, nullptr);
    for (std::size_t v = 0; v < configs.size(); ++v) {
      Config c = configs[v];
      c.seed = seed_base.seed;
      const auto state = train_retrieval(train, classifiers, c, nullptr, nullptr);
      const auto report = evaluate(state, eval);
      results[v].seeds.push_back(c.seed);
      results[v].reports.push_back(report);
      if (options.log) {
        *options.log << "ablation " << options.variants[v] << " seed " << c.seed << " mR " << report.mR << "\n";
      }
    }
  }
  return results;
}

json ablation_to_json(const std::vector<VariantResult>& results) {
  json out = json::array();
  for (const auto& r : results) {
    json runs = json::array();
    for (std::size_t i = 0; i < r.reports.size(); ++i) {
      json e = report_to_json(r.reports[i]);
      e["seed"] = r.seeds[i];
      runs.push_back(e);
    }
    out.push_back({{"variant", r.variant}, {"median_mR", r.median_mR()}, {"runs", runs}});
  }
  return out;
}

std::string ablation_table(const std::vector<VariantResult>& results) {
  std::vector<std::pair<std::string, RetrievalReport>> rows;
  for (const auto& r : results) {
    if (r.reports.empty()) continue;
    // The row shows the run whose mR is the median.
    std::vector<std::size_t> idx(r.reports.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return r.reports[a].mR != r.reports[b].mR ? r.reports[a].mR < r.reports[b].mR : a < b;
    });
    rows.emplace_back(r.variant, r.reports[idx[idx.size() / 2]]);
  }
  return format_report_table(rows);
}

// ---------------------------------------------------------------------------
// Attention export

std::vector<std::filesystem::path> export_attention(const RetrievalState& state, const Image& image,
                                                    const std::filesystem::path& out_dir) {
  ScaleDecoupling<float>::Output details;
  state.model.embed_image(image, nullptr, &details);
  if (details.passes.empty()) throw Error("this model has no attention maps (attention mode none)");
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  auto upsample = [&](const Map2<float>& m) {
    Map2<float> out(image.h, image.w);
    for (int y = 0; y < image.h; ++y) {
      for (int x = 0; x < image.w; ++x) {
        out.at(y, x) = m.at(std::min(m.h - 1, y * m.h / image.h), std::min(m.w - 1, x * m.w / image.w));
      }
    }
    return out;
  };
  const bool suppress = state.config.effective_attention() == AttentionMode::bsd;
  for (const auto& [direction, result] : details.passes) {
    const std::string tag = direction == Direction::small_to_large ? "s2l" : "l2s";
    for (int m = 0; m < 3; ++m) {
      const auto a = out_dir / (tag + "_scale" + std::to_string(m + 1) + "_attention.png");
      write_png_gray(upsample(result.attention[m]), a);
      written.push_back(a);
      if (suppress) {
        const auto b = out_dir / (tag + "_scale" + std::to_string(m + 1) + "_mask.png");
        write_png_gray(upsample(result.masks[m]), b);
        written.push_back(b);
      }
    }
  }
  return written;
}

}  // namespace ssjdn
