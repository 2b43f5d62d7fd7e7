#pragma once

#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ssjdn/retrieval.hpp"

namespace ssjdn::testing {

// Brute-force recall: full stable sort of every query's candidates.
double oracle_recall(const Matrix& s, const GroundTruth& gt, int k, RetrievalDirection direction);

struct ProbeResult {
  int probes = 0;
  double worst = 0.0;  // largest relative error seen
  std::string worst_at;
};

double relative_error(double analytic, double numeric);

// A differentiable coordinate and its analytic derivative.
struct Coordinate {
  double* value;
  double analytic;
  std::string name;
};

// Central differences of loss() at randomly chosen coordinates. Each value is
// restored after its probe.
ProbeResult probe_gradient(const std::vector<Coordinate>& coords, const std::function<double()>& loss, int probes,
                           std::mt19937_64& rng, double step = 1e-5);

// Appends every entry of values (with matching grads) under a name prefix.
void add_coordinates(std::vector<Coordinate>& coords, std::vector<double>& values, const std::vector<double>& grads,
                     const std::string& name);

// Random values in [lo, hi).
std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);

}  // namespace ssjdn::testing
