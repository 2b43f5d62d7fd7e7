#include "ssjdn/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <thread>

#include "ssjdn/matching.hpp"

namespace ssjdn {

int thread_budget() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("SSJDN_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) return static_cast<int>(std::min<long>(v, 256));
  }
  return hw;
}

namespace {

double norm_of(const std::vector<float>& v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

}  // namespace

Matrix similarity_matrix(const std::vector<std::vector<float>>& image_embs,
                         const std::vector<std::vector<float>>& text_embs) {
  std::vector<double> inorm(image_embs.size()), tnorm(text_embs.size());
  for (std::size_t i = 0; i < image_embs.size(); ++i) {
    inorm[i] = norm_of(image_embs[i]);
    if (inorm[i] == 0.0) throw Error("degenerate embedding: image " + std::to_string(i));
  }
  for (std::size_t j = 0; j < text_embs.size(); ++j) {
    tnorm[j] = norm_of(text_embs[j]);
    if (tnorm[j] == 0.0) throw Error("degenerate embedding: text " + std::to_string(j));
    if (!image_embs.empty() && text_embs[j].size() != image_embs[0].size()) {
      throw Error("similarity_matrix: text " + std::to_string(j) + " has the wrong dimension");
    }
  }
  Matrix s(image_embs.size(), text_embs.size());
  parallel_for(image_embs.size(), [&](std::size_t i) {
    const auto& a = image_embs[i];
    for (std::size_t j = 0; j < text_embs.size(); ++j) {
      const auto& b = text_embs[j];
      double dot = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) dot += static_cast<double>(a[k]) * b[k];
      s(i, j) = std::clamp(dot / (inorm[i] * tnorm[j]), -1.0, 1.0);
    }
  });
  return s;
}

GroundTruth contiguous_ground_truth(std::size_t num_images, int per_image) {
  if (per_image < 1) throw Error("ground truth needs at least one caption per image");
  std::vector<int> owners(num_images * per_image);
  for (std::size_t j = 0; j < owners.size(); ++j) owners[j] = static_cast<int>(j / per_image);
  return ground_truth_from_owners(std::move(owners), num_images);
}

GroundTruth ground_truth_from_owners(std::vector<int> image_of, std::size_t num_images) {
  GroundTruth gt;
  gt.captions_of.resize(num_images);
  for (std::size_t j = 0; j < image_of.size(); ++j) {
    const int owner = image_of[j];
    if (owner < 0 || static_cast<std::size_t>(owner) >= num_images) {
      throw Error("caption " + std::to_string(j) + " maps to missing image " + std::to_string(owner));
    }
    gt.captions_of[owner].push_back(static_cast<int>(j));
  }
  for (std::size_t i = 0; i < num_images; ++i) {
    if (gt.captions_of[i].empty()) throw Error("image " + std::to_string(i) + " has no captions");
  }
  gt.image_of = std::move(image_of);
  return gt;
}

double recall_at_k(const Matrix& s, const GroundTruth& gt, int k, RetrievalDirection direction) {
  if (k < 1) throw Error("K must be at least 1");
  if (s.rows != gt.num_images() || s.cols != gt.num_captions()) {
    throw Error("similarity matrix does not match ground truth");
  }
  const bool i2t = direction == RetrievalDirection::i2t;
  const std::size_t queries = i2t ? s.rows : s.cols;
  const std::size_t candidates = i2t ? s.cols : s.rows;
  if (static_cast<std::size_t>(k) > candidates) {
    throw Error("K=" + std::to_string(k) + " exceeds candidate count " + std::to_string(candidates));
  }
  if (queries == 0) return 0.0;
  std::vector<unsigned char> hit(queries, 0);
  parallel_for(queries, [&](std::size_t q) {
    auto score = [&](std::size_t c) { return i2t ? s(q, c) : s(c, q); };
    // Best-placed ground truth under (score desc, index asc).
    std::size_t best = 0;
    double best_score = 0.0;
    bool first = true;
    auto consider = [&](std::size_t c) {
      const double v = score(c);
      if (first || v > best_score || (v == best_score && c < best)) {
        best = c;
        best_score = v;
        first = false;
      }
    };
    if (i2t) {
      for (int c : gt.captions_of[q]) consider(static_cast<std::size_t>(c));
    } else {
      consider(static_cast<std::size_t>(gt.image_of[q]));
    }
    std::size_t ahead = 0;
    for (std::size_t c = 0; c < candidates && ahead < static_cast<std::size_t>(k); ++c) {
      const double v = score(c);
      if (v > best_score || (v == best_score && c < best)) ++ahead;
    }
    hit[q] = ahead < static_cast<std::size_t>(k);
  });
  const std::size_t hits = std::accumulate(hit.begin(), hit.end(), std::size_t{0});
  return static_cast<double>(hits) / static_cast<double>(queries);
}

double mean_recall(double i2t_r1, double i2t_r5, double i2t_r10, double t2i_r1, double t2i_r5, double t2i_r10) {
  return (i2t_r1 + i2t_r5 + i2t_r10 + t2i_r1 + t2i_r5 + t2i_r10) / 6.0;
}

double mean_recall(const RetrievalReport& r) {
  return mean_recall(r.i2t_r1, r.i2t_r5, r.i2t_r10, r.t2i_r1, r.t2i_r5, r.t2i_r10);
}

RetrievalReport compute_report(const Matrix& s, const GroundTruth& gt) {
  RetrievalReport r;
  r.i2t_r1 = recall_at_k(s, gt, 1, RetrievalDirection::i2t);
  r.i2t_r5 = recall_at_k(s, gt, 5, RetrievalDirection::i2t);
  r.i2t_r10 = recall_at_k(s, gt, 10, RetrievalDirection::i2t);
  r.t2i_r1 = recall_at_k(s, gt, 1, RetrievalDirection::t2i);
  r.t2i_r5 = recall_at_k(s, gt, 5, RetrievalDirection::t2i);
  r.t2i_r10 = recall_at_k(s, gt, 10, RetrievalDirection::t2i);
  r.mR = mean_recall(r);
  return r;
}

nlohmann::json report_to_json(const RetrievalReport& r, const std::string& fingerprint) {
  nlohmann::json j = {{"i2t_r1", r.i2t_r1}, {"i2t_r5", r.i2t_r5}, {"i2t_r10", r.i2t_r10},
                      {"t2i_r1", r.t2i_r1}, {"t2i_r5", r.t2i_r5}, {"t2i_r10", r.t2i_r10},
                      {"mR", r.mR}};
  if (!fingerprint.empty()) j["config_fingerprint"] = fingerprint;
  return j;
}

RetrievalReport report_from_json(const nlohmann::json& j) {
  RetrievalReport r;
  r.i2t_r1 = j.at("i2t_r1").get<double>();
  r.i2t_r5 = j.at("i2t_r5").get<double>();
  r.i2t_r10 = j.at("i2t_r10").get<double>();
  r.t2i_r1 = j.at("t2i_r1").get<double>();
  r.t2i_r5 = j.at("t2i_r5").get<double>();
  r.t2i_r10 = j.at("t2i_r10").get<double>();
  r.mR = j.at("mR").get<double>();
  return r;
}

std::string format_report_table(const std::vector<std::pair<std::string, RetrievalReport>>& rows) {
  std::size_t label_width = 6;
  for (const auto& row : rows) label_width = std::max(label_width, row.first.size());
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s | %27s | %27s | %6s\n", static_cast<int>(label_width), "",
                "Sentence retrieval (I2T)", "Image retrieval (T2I)", "");
  out << buf;
  std::snprintf(buf, sizeof buf, "%-*s | %8s %8s %8s | %8s %8s %8s | %6s\n", static_cast<int>(label_width),
                "Method", "R@1", "R@5", "R@10", "R@1", "R@5", "R@10", "mR");
  out << buf;
  out << std::string(label_width + 70, '-') << "\n";
  for (const auto& [label, r] : rows) {
    std::snprintf(buf, sizeof buf, "%-*s | %8.2f %8.2f %8.2f | %8.2f %8.2f %8.2f | %6.2f\n",
                  static_cast<int>(label_width), label.c_str(), 100 * r.i2t_r1, 100 * r.i2t_r5, 100 * r.i2t_r10,
                  100 * r.t2i_r1, 100 * r.t2i_r5, 100 * r.t2i_r10, 100 * r.mR);
    out << buf;
  }
  return out.str();
}

std::vector<RankedItem> rank_query(std::span<const float> query, const std::vector<std::vector<float>>& corpus,
                                   int top_k) {
  if (corpus.empty()) throw Error("rank_query: empty corpus");
  if (top_k < 1 || static_cast<std::size_t>(top_k) > corpus.size()) {
    throw Error("rank_query: top_k must be in [1, " + std::to_string(corpus.size()) + "]");
  }
  std::vector<RankedItem> items(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    items[i] = {static_cast<int>(i), similarity<float>(query, corpus[i])};
  }
  std::partial_sort(items.begin(), items.begin() + top_k, items.end(), [](const RankedItem& a, const RankedItem& b) {
    return a.score != b.score ? a.score > b.score : a.index < b.index;
  });
  items.resize(top_k);
  return items;
}

}  // namespace ssjdn
