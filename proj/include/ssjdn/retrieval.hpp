#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ssjdn/tensor.hpp"

namespace ssjdn {

// (i, j) = cosine(image i, text j). Throws naming the index of a zero
// embedding.
Matrix similarity_matrix(const std::vector<std::vector<float>>& image_embs,
                         const std::vector<std::vector<float>>& text_embs);

// Caption indices per image and the owning image per caption.
struct GroundTruth {
  std::vector<std::vector<int>> captions_of;
  std::vector<int> image_of;

  std::size_t num_images() const { return captions_of.size(); }
  std::size_t num_captions() const { return image_of.size(); }
};

// Caption j belongs to image j / per_image. Used for contiguous layouts.
GroundTruth contiguous_ground_truth(std::size_t num_images, int per_image);
// Builds the inverse map and validates that each caption has one owner.
GroundTruth ground_truth_from_owners(std::vector<int> image_of, std::size_t num_images);

enum class RetrievalDirection { i2t, t2i };

// Fraction of queries with a ground-truth item among the top K candidates.
// Ranking is by score descending, ties by ascending index.
double recall_at_k(const Matrix& s, const GroundTruth& gt, int k, RetrievalDirection direction);

struct RetrievalReport {
  double i2t_r1 = 0, i2t_r5 = 0, i2t_r10 = 0;
  double t2i_r1 = 0, t2i_r5 = 0, t2i_r10 = 0;
  double mR = 0;

  bool operator==(const RetrievalReport&) const = default;
};

double mean_recall(double i2t_r1, double i2t_r5, double i2t_r10, double t2i_r1, double t2i_r5, double t2i_r10);
double mean_recall(const RetrievalReport& report);

// All six recalls plus mR. K values larger than the candidate count are
// rejected by recall_at_k.
RetrievalReport compute_report(const Matrix& s, const GroundTruth& gt);

nlohmann::json report_to_json(const RetrievalReport& report, const std::string& fingerprint = {});
RetrievalReport report_from_json(const nlohmann::json& j);
// Aligned table: one row per labelled report.
std::string format_report_table(const std::vector<std::pair<std::string, RetrievalReport>>& rows);

struct RankedItem {
  int index = 0;
  double score = 0.0;
};

// Top-k corpus items by cosine with the query.
std::vector<RankedItem> rank_query(std::span<const float> query, const std::vector<std::vector<float>>& corpus,
                                   int top_k);

// Worker count from SSJDN_THREADS (default: hardware concurrency, min 1).
int thread_budget();

// Runs fn(q) for q in [0, n) on up to thread_budget() workers, one contiguous
// chunk per worker. Results must not depend on the schedule.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(thread_budget()), n);
  if (workers <= 1) {
    for (std::size_t q = 0; q < n; ++q) fn(q);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] {
      for (std::size_t q = lo; q < hi; ++q) fn(q);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace ssjdn
