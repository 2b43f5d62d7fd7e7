#include "gradcheck.hpp"

#include <cmath>

#include "ssjdn/matching.hpp"

namespace ssjdn::testing {

namespace {

Tensor3<double> random_tensor(int h, int w, int c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor3<double> t(h, w, c);
  t.data = random_vector(t.size(), rng, lo, hi);
  return t;
}

double readout(const std::vector<double>& w, const std::vector<double>& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * x[i];
  return s;
}

template <typename Module>
void collect_params(Module& m, std::vector<Coordinate>& coords) {
  m.visit("p", [&](const std::string& path, Param<double>& p) { add_coordinates(coords, p.value, p.grad, path); });
}

template <typename Module>
void zero_and_jitter(Module& m, std::mt19937_64& rng) {
  // Non-zero biases keep ReLU units away from the all-off regime.
  m.visit("p", [&](const std::string& path, Param<double>& p) {
    p.zero_grad();
    if (path.size() >= 4 && path.compare(path.size() - 4, 4, "bias") == 0) {
      for (auto& v : p.value) v = std::uniform_real_distribution<double>(-0.1, 0.2)(rng);
    }
  });
}

}  // namespace

ProbeResult check_backbone(std::uint64_t seed, int probes) {
  std::mt19937_64 rng(seed);
  Backbone<double> net(BackboneConfig{4, {2, 1}});
  net.init(rng);
  zero_and_jitter(net, rng);
  auto image = random_tensor(8, 8, 3, rng, 0.0, 1.0);
  Backbone<double>::Cache cache;
  const auto out = net.forward(image, &cache);
  const auto w = random_vector(out.size(), rng);
  Tensor3<double> grad_out(out.h, out.w, out.c);
  grad_out.data = w;
  Tensor3<double> grad_in;
  net.backward(cache, grad_out, &grad_in);
  std::vector<Coordinate> coords;
  collect_params(net, coords);
  add_coordinates(coords, image.data, grad_in.data, "image");
  return probe_gradient(coords, [&] { return readout(w, net.forward(image, nullptr).data); }, probes, rng);
}

ProbeResult check_salience_attention(std::uint64_t seed, int probes) {
  std::mt19937_64 rng(seed);
  SalienceAttention<double> unit;
  unit.init(rng);
  zero_and_jitter(unit, rng);
  auto feature = random_tensor(6, 6, 4, rng);
  SalienceAttention<double>::Cache cache;
  const auto a = unit.forward(feature, &cache);
  const auto w = random_vector(a.size(), rng);
  AttentionMap<double> grad_a(a.h, a.w);
  grad_a.data = w;
  Tensor3<double> grad_feature;
  unit.backward(cache, grad_a, &grad_feature);
  std::vector<Coordinate> coords;
  collect_params(unit, coords);
  add_coordinates(coords, feature.data, grad_feature.data, "feature");
  return probe_gradient(coords, [&] { return readout(w, unit.forward(feature, nullptr).data); }, probes, rng);
}

ProbeResult check_fuse_scales(std::uint64_t seed, int probes) {
  std::mt19937_64 rng(seed);
  const int d = 3, embed = 5;
  ScaleFusion<double> fusion(6, d, embed);
  fusion.init(rng);
  zero_and_jitter(fusion, rng);
  std::vector<Tensor3<double>> maps;
  for (int i = 0; i < 6; ++i) maps.push_back(random_tensor(4, 4, d, rng));
  ScaleFusion<double>::Cache cache;
  const auto out = fusion.forward(maps, &cache);
  const auto w = random_vector(out.size(), rng);
  auto grad_maps = fusion.backward(cache, w);
  std::vector<Coordinate> coords;
  collect_params(fusion, coords);
  for (int i = 0; i < 6; ++i) add_coordinates(coords, maps[i].data, grad_maps[i].data, "map" + std::to_string(i));
  return probe_gradient(coords, [&] { return readout(w, fusion.forward(maps, nullptr)); }, probes, rng);
}

ProbeResult check_classification_loss(std::uint64_t seed, int probes, ClassificationLossKind kind) {
  std::mt19937_64 rng(seed);
  auto logits = random_vector(8, rng, -3.0, 3.0);
  const int label = std::uniform_int_distribution<int>(0, 7)(rng);
  const auto lg = classification_loss<double>(logits, label, kind);
  std::vector<Coordinate> coords;
  add_coordinates(coords, logits, lg.grad, "logits");
  return probe_gradient(coords, [&] { return classification_loss<double>(logits, label, kind).loss; }, probes, rng);
}

ProbeResult check_semantic_triplet_loss(std::uint64_t seed, int probes) {
  std::mt19937_64 rng(seed);
  const std::size_t n = 6;
  const double margin = 0.2;
  std::uniform_int_distribution<int> cls(0, 2);
  // Redraw until no hinge sits within 1e-3 of its kink.
  for (;;) {
    Matrix s(n, n);
    s.data = random_vector(n * n, rng);
    std::vector<int> qu(n), qv(n);
    for (auto& q : qu) q = cls(rng);
    for (auto& q : qv) q = cls(rng);
    const auto beta = beta_matrix(qu, qv, 1.2);
    bool near_kink = false;
    for (std::size_t i = 0; i < n && !near_kink; ++i) {
      for (std::size_t j = 0; j < n && !near_kink; ++j) {
        if (i == j) continue;
        const double a = margin - beta.beta(i, i) * s(i, i) + beta.beta(i, j) * s(i, j);
        const double b = margin - beta.beta(j, j) * s(j, j) + beta.beta(i, j) * s(i, j);
        near_kink = std::abs(a) < 1e-3 || std::abs(b) < 1e-3;
      }
    }
    if (near_kink) continue;
    Matrix grad;
    semantic_triplet_loss(s, beta, margin, &grad);
    std::vector<Coordinate> coords;
    add_coordinates(coords, s.data, grad.data, "S");
    return probe_gradient(coords, [&] { return semantic_triplet_loss(s, beta, margin); }, probes, rng);
  }
}

ProbeResult check_conv(std::uint64_t seed, int probes, int stride, int dilation) {
  std::mt19937_64 rng(seed);
  Conv2d<double> conv(ConvSpec{3, 4, 3, stride, dilation});
  conv.init(rng);
  zero_and_jitter(conv, rng);
  auto input = random_tensor(7, 6, 3, rng);
  const auto out = conv.forward(input);
  const auto w = random_vector(out.size(), rng);
  Tensor3<double> grad_out(out.h, out.w, out.c);
  grad_out.data = w;
  Tensor3<double> grad_in;
  conv.backward(input, grad_out, &grad_in);
  std::vector<Coordinate> coords;
  collect_params(conv, coords);
  add_coordinates(coords, input.data, grad_in.data, "input");
  return probe_gradient(coords, [&] { return readout(w, conv.forward(input).data); }, probes, rng);
}

ProbeResult check_linear(std::uint64_t seed, int probes) {
  std::mt19937_64 rng(seed);
  Linear<double> lin(5, 3);
  lin.init(rng);
  zero_and_jitter(lin, rng);
  auto x = random_vector(5, rng);
  const auto w = random_vector(3, rng);
  std::vector<double> gx(5, 0.0);
  lin.backward(x, w, gx);
  std::vector<Coordinate> coords;
  collect_params(lin, coords);
  add_coordinates(coords, x, gx, "x");
  return probe_gradient(coords, [&] { return readout(w, lin.forward(x)); }, probes, rng);
}

ProbeResult check_text_encoder(std::uint64_t seed, int probes) {
  std::mt19937_64 rng(seed);
  TextEncoder<double> enc(12, 4, 5);
  enc.init(rng);
  zero_and_jitter(enc, rng);
  std::vector<int> tokens{2, 7, 3, 11, 5, 0, 0};
  TextEncoder<double>::Cache cache;
  const auto out = enc.forward(tokens, 5, &cache);
  const auto w = random_vector(out.size(), rng);
  enc.backward(cache, w);
  std::vector<Coordinate> coords;
  collect_params(enc, coords);
  return probe_gradient(coords, [&] { return readout(w, enc.forward(tokens, 5, nullptr)); }, probes, rng);
}

ProbeResult check_aspp(std::uint64_t seed, int probes) {
  std::mt19937_64 rng(seed);
  Aspp<double> aspp(3, {1, 2, 3});
  aspp.init(rng);
  zero_and_jitter(aspp, rng);
  auto input = random_tensor(6, 6, 3, rng);
  Aspp<double>::Cache cache;
  const auto out = aspp.forward(input, &cache);
  std::array<std::vector<double>, 3> w;
  std::array<Tensor3<double>, 3> grads;
  for (int m = 0; m < 3; ++m) {
    w[m] = random_vector(out.maps[m].size(), rng);
    grads[m] = Tensor3<double>(out.maps[m].h, out.maps[m].w, out.maps[m].c);
    grads[m].data = w[m];
  }
  Tensor3<double> grad_in;
  aspp.backward(cache, grads, &grad_in);
  std::vector<Coordinate> coords;
  collect_params(aspp, coords);
  add_coordinates(coords, input.data, grad_in.data, "input");
  return probe_gradient(
      coords,
      [&] {
        const auto o = aspp.forward(input, nullptr);
        double s = 0.0;
        for (int m = 0; m < 3; ++m) s += readout(w[m], o.maps[m].data);
        return s;
      },
      probes, rng);
}

ProbeResult check_decoupler(std::uint64_t seed, int probes, Direction direction, bool suppress) {
  std::mt19937_64 rng(seed);
  DirectionalDecoupler<double> dec;
  dec.init(rng);
  zero_and_jitter(dec, rng);
  ScaleFeatureSet<double> scales;
  for (auto& m : scales.maps) m = random_tensor(5, 5, 3, rng);
  DirectionalDecoupler<double>::Cache cache;
  const auto out = dec.forward(scales, direction, 0.25, suppress, &cache);
  std::array<std::vector<double>, 3> w;
  std::array<Tensor3<double>, 3> grads, grad_scales;
  for (int m = 0; m < 3; ++m) {
    w[m] = random_vector(out.decoupled[m].size(), rng);
    grads[m] = Tensor3<double>(5, 5, 3);
    grads[m].data = w[m];
  }
  dec.backward(cache, grads, &grad_scales);
  std::vector<Coordinate> coords;
  collect_params(dec, coords);
  for (int m = 0; m < 3; ++m) add_coordinates(coords, scales.maps[m].data, grad_scales[m].data, "F" + std::to_string(m));
  return probe_gradient(
      coords,
      [&] {
        const auto o = dec.forward(scales, direction, 0.25, suppress, nullptr);
        double s = 0.0;
        for (int m = 0; m < 3; ++m) s += readout(w[m], o.decoupled[m].data);
        return s;
      },
      probes, rng, 1e-6);
}

ProbeResult check_scale_decoupling_end_to_end(std::uint64_t seed, int probes, AttentionMode mode) {
  std::mt19937_64 rng(seed);
  Backbone<double> net(BackboneConfig{3, {1}});
  Aspp<double> aspp(3, {1, 2, 3});
  ScaleDecoupling<double> sd(ScaleDecouplingConfig{mode, DirectionMode::both, 0.25}, 3, 4);
  net.init(rng);
  aspp.init(rng);
  sd.init(rng);
  zero_and_jitter(net, rng);
  zero_and_jitter(aspp, rng);
  zero_and_jitter(sd, rng);
  auto image = random_tensor(6, 6, 3, rng, 0.0, 1.0);
  auto run = [&](Backbone<double>::Cache* bc, Aspp<double>::Cache* ac, ScaleDecoupling<double>::Cache* sc) {
    const auto g = net.forward(image, bc);
    const auto s = aspp.forward(g, ac);
    return sd.forward(s, sc).embedding;
  };
  Backbone<double>::Cache bc;
  Aspp<double>::Cache ac;
  ScaleDecoupling<double>::Cache sc;
  const auto emb = run(&bc, &ac, &sc);
  const auto w = random_vector(emb.size(), rng);
  std::array<Tensor3<double>, 3> grad_scales;
  sd.backward(sc, w, &grad_scales);
  Tensor3<double> grad_global, grad_image;
  aspp.backward(ac, grad_scales, &grad_global);
  net.backward(bc, grad_global, &grad_image);
  std::vector<Coordinate> coords;
  collect_params(net, coords);
  collect_params(aspp, coords);
  collect_params(sd, coords);
  add_coordinates(coords, image.data, grad_image.data, "image");
  return probe_gradient(coords, [&] { return readout(w, run(nullptr, nullptr, nullptr)); }, probes, rng, 1e-6);
}

ProbeResult check_image_classifier(std::uint64_t seed, int probes) {
  std::mt19937_64 rng(seed);
  ImageClassifier<double> cls(BackboneConfig{3, {2, 1}}, 4, 3);
  cls.init(rng);
  zero_and_jitter(cls, rng);
  auto image = random_tensor(8, 8, 3, rng, 0.0, 1.0);
  ImageClassifier<double>::Cache cache;
  const auto out = cls.forward(image, &cache);
  const auto w = random_vector(out.logits.size(), rng);
  cls.backward(cache, w);
  std::vector<Coordinate> coords;
  collect_params(cls, coords);
  return probe_gradient(coords, [&] { return readout(w, cls.forward(image, nullptr).logits); }, probes, rng);
}

ProbeResult check_text_classifier(std::uint64_t seed, int probes) {
  std::mt19937_64 rng(seed);
  TextClassifier<double> cls(10, 3, 4, 3);
  cls.init(rng);
  zero_and_jitter(cls, rng);
  std::vector<int> tokens{4, 2, 9, 0};
  TextClassifier<double>::Cache cache;
  const auto out = cls.forward(tokens, 3, &cache);
  const auto w = random_vector(out.logits.size(), rng);
  cls.backward(cache, w);
  std::vector<Coordinate> coords;
  collect_params(cls, coords);
  return probe_gradient(coords, [&] { return readout(w, cls.forward(tokens, 3, nullptr).logits); }, probes, rng);
}

ProbeResult check_similarity(std::uint64_t seed, int probes) {
  std::mt19937_64 rng(seed);
  auto a = random_vector(6, rng), b = random_vector(6, rng);
  std::vector<double> ga(6, 0.0), gb(6, 0.0);
  similarity_backward<double>(a, b, 1.0, ga, gb);
  std::vector<Coordinate> coords;
  add_coordinates(coords, a, ga, "a");
  add_coordinates(coords, b, gb, "b");
  return probe_gradient(coords, [&] { return similarity<double>(a, b); }, probes, rng);
}

}  // namespace ssjdn::testing
