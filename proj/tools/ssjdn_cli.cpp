// Command-line front end: data generation, two-phase training, evaluation,
// search, ablation and attention export.
#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ssjdn/harness.hpp"
#include "ssjdn/simd.hpp"

namespace fs = std::filesystem;
using namespace ssjdn;

namespace {

Config config_or_default(const std::string& path, bool paper) {
  Config c = path.empty() ? Config{} : load_config(path);
  if (paper) c = paper_scale(c);
  validate_config(c);
  return c;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scale-semantic joint decoupling retrieval"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic image-caption dataset");
  std::string gen_out;
  SyntheticSpec spec;
  std::string gen_split = "train";
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--num-images", spec.num_images, "Number of images");
  gen->add_option("--categories", spec.num_categories, "Number of categories");
  gen->add_option("--seed", spec.seed, "Generator seed");
  gen->add_option("--image-size", spec.image_size, "Image height and width");
  gen->add_option("--split", gen_split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  // train-classifiers
  auto* tc = app.add_subcommand("train-classifiers", "Phase 1: category classifiers");
  std::string tc_data, tc_config, tc_out;
  bool tc_paper = false;
  tc->add_option("--data", tc_data, "Dataset directory")->required();
  tc->add_option("--config", tc_config, "Config JSON");
  tc->add_option("--out", tc_out, "Classifier checkpoint")->required();
  tc->add_flag("--paper-scale", tc_paper, "Use the full-size settings");

  // train
  auto* tr = app.add_subcommand("train", "Phase 2: retrieval network with frozen classifiers");
  std::string tr_data, tr_cls, tr_config, tr_out;
  bool tr_paper = false;
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--classifiers", tr_cls, "Classifier checkpoint (default: config field)");
  tr->add_option("--config", tr_config, "Config JSON");
  tr->add_option("--out", tr_out, "Retrieval checkpoint")->required();
  tr->add_flag("--paper-scale", tr_paper, "Use the full-size settings");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate R@K and mR");
  std::string ev_ckpt, ev_data, ev_report;
  ev->add_option("--ckpt", ev_ckpt, "Retrieval checkpoint")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--report", ev_report, "Output JSON report");

  // search
  auto* se = app.add_subcommand("search", "Rank dataset images for a text query");
  std::string se_ckpt, se_data, se_query;
  int se_k = 5;
  se->add_option("--ckpt", se_ckpt, "Retrieval checkpoint")->required();
  se->add_option("--data", se_data, "Dataset directory")->required();
  se->add_option("--query", se_query, "Query sentence")->required();
  se->add_option("--top-k", se_k, "Number of results");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train and evaluate ablation variants");
  std::string ab_data, ab_eval, ab_config, ab_variants = "full,w/o-bsd,w/o-lsd,w/o-stl,w/o-all", ab_out;
  int ab_seeds = 3;
  ab->add_option("--data", ab_data, "Training dataset directory")->required();
  ab->add_option("--eval-data", ab_eval, "Evaluation dataset (default: held-out part of --data)");
  ab->add_option("--config", ab_config, "Base config JSON");
  ab->add_option("--variants", ab_variants, "Comma-separated variant names");
  ab->add_option("--seeds", ab_seeds, "Seeds per variant");
  ab->add_option("--out", ab_out, "Per-variant results JSON");

  // export-attention
  auto* ex = app.add_subcommand("export-attention", "Write attention maps and masks for one image");
  std::string ex_ckpt, ex_image, ex_out;
  ex->add_option("--ckpt", ex_ckpt, "Retrieval checkpoint")->required();
  ex->add_option("--image", ex_image, "PNG image")->required();
  ex->add_option("--out", ex_out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      spec.split = gen_split == "train" ? Split::train : gen_split == "val" ? Split::val : Split::test;
      const auto ds = generate_synthetic_dataset(spec);
      save_dataset(ds, gen_out);
      std::cout << "wrote " << ds.size() << " samples to " << gen_out << "\n";
    } else if (*tc) {
      const Config config = config_or_default(tc_config, tc_paper);
      const auto [train, val] = split_train_val(load_dataset(tc_data), config.val_fraction);
      std::cerr << "simd backend: " << simd::backend_name(simd::active_backend()) << "\n";
      auto state = train_classifiers(train, config, &std::cerr);
      const auto acc = classifier_accuracy(state, train);
      std::cout << "train accuracy image " << acc.image << " text " << acc.text << "\n";
      if (val.size() > 0) {
        const auto vacc = classifier_accuracy(state, val);
        std::cout << "val accuracy image " << vacc.image << " text " << vacc.text << "\n";
      }
      save_classifiers(state, tc_out);
    } else if (*tr) {
      Config config = config_or_default(tr_config, tr_paper);
      if (!tr_cls.empty()) config.classifiers = tr_cls;
      if (config.classifiers.empty()) throw Error("no classifier checkpoint (use --classifiers)");
      const auto classifiers = load_classifiers(config.classifiers);
      const auto [train, val] = split_train_val(load_dataset(tr_data), config.val_fraction);
      auto state = train_retrieval(train, classifiers, config, &val, &std::cerr);
      save_retrieval(state, tr_out);
    } else if (*ev) {
      const auto state = load_retrieval(ev_ckpt);
      const auto report = evaluate(state, load_dataset(ev_data));
      std::cout << format_report_table({{"SSJDN", report}});
      if (!ev_report.empty()) write_json(report_to_json(report, config_fingerprint(state.config)), ev_report);
    } else if (*se) {
      const auto state = load_retrieval(se_ckpt);
      const auto ds = load_dataset(se_data);
      std::vector<std::vector<float>> corpus(ds.size());
      parallel_for(ds.size(), [&](std::size_t i) { corpus[i] = state.image_embedding(ds.samples[i].image); });
      const auto query = state.text_embedding(se_query);
      const auto ranked = rank_query(query, corpus, se_k);
      std::cout << "query: " << se_query << "\n";
      for (std::size_t r = 0; r < ranked.size(); ++r) {
        const auto& s = ds.samples[ranked[r].index];
        std::printf("%2zu. %s  score %.4f  (%s)\n", r + 1, s.id.c_str(), ranked[r].score, s.captions[0].c_str());
      }
    } else if (*ab) {
      const Config base = config_or_default(ab_config, false);
      auto [train, held_out] = split_train_val(load_dataset(ab_data), base.val_fraction);
      const Dataset eval = ab_eval.empty() ? held_out : load_dataset(ab_eval);
      AblationOptions opts{split_list(ab_variants), ab_seeds, &std::cerr};
      const auto results = run_ablation(train, eval, base, opts);
      std::cout << ablation_table(results);
      for (const auto& r : results) std::printf("%-16s median mR %.4f\n", r.variant.c_str(), r.median_mR());
      if (!ab_out.empty()) write_json(ablation_to_json(results), ab_out);
    } else if (*ex) {
      const auto state = load_retrieval(ex_ckpt);
      for (const auto& p : export_attention(state, read_png_rgb(ex_image), ex_out)) std::cout << p.string() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
