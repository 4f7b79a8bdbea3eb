// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: dataset generation and the
// search -> refine -> reconfigure -> eval/inspect/verify workflow.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "apma/apma.hpp"

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  bool f64_oracle = false;
  bool json = false;
};

void emit(const Globals& g, const nlohmann::json& j, const std::string& text) {
  if (g.json) std::cout << j.dump(2) << "\n";
  else std::cout << text;
}

apma::Splits splits_for(const apma::RunConfig& c) { return apma::load_splits(c); }

apma::EpochCallback progress(const Globals& g, nlohmann::json& log) {
  return [&g, &log](const apma::EpochReport& r) {
    log.push_back(apma::to_json(r));
    if (!g.json) std::cout << apma::epoch_text(r) << std::endl;
  };
}

int run(int argc, char** argv) {
  CLI::App app{"Multi-head-aware channel pruning for toy vision transformers"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed (gen-data) or config seed override (search)");
  app.add_option("--threads", g.threads, "Evaluation worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--f64-oracle", g.f64_oracle, "Cross-check eval/verify in 64-bit arithmetic");
  app.add_flag("--json", g.json, "Emit reports as JSON");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic pattern dataset");
  std::uint32_t count = 0, classes = 10, heldout_count = 0;
  std::string out, in, data, heldout_out, config_path, masked, compact_path, preset_name;
  gen->add_option("--count", count, "Number of images")->required();
  gen->add_option("--classes", classes, "Number of classes (<= 16)");
  gen->add_option("--out", out, "Output dataset file")->required();
  gen->add_option("--heldout-out", heldout_out, "Also write a held-out split (seed + 1)");
  gen->add_option("--heldout-count", heldout_count, "Held-out image count (default: --count)");

  auto* search = app.add_subcommand("search", "Budgeted mask search");
  search->add_option("--config", config_path, "RunConfig JSON")->required()->check(CLI::ExistingFile);
  search->add_option("--out", out, "Searched checkpoint")->required();

  auto* refine = app.add_subcommand("refine", "Recover accuracy with frozen masks");
  refine->add_option("--in", in, "Searched checkpoint")->required()->check(CLI::ExistingFile);
  refine->add_option("--out", out, "Refined checkpoint")->required();

  auto* recon = app.add_subcommand("reconfigure", "Physically remove pruned channels");
  recon->add_option("--in", in, "Refined checkpoint")->required()->check(CLI::ExistingFile);
  recon->add_option("--out", out, "Compacted checkpoint")->required();

  auto* eval = app.add_subcommand("eval", "Top-1 accuracy and MAC budget");
  eval->add_option("--in", in, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data, "Dataset file")->required()->check(CLI::ExistingFile);

  auto* insp = app.add_subcommand("inspect", "Per-head spectra, kept channels, weight histograms");
  insp->add_option("--in", in, "Checkpoint")->required()->check(CLI::ExistingFile);

  auto* verify = app.add_subcommand("verify", "Check a compacted model against its masked source");
  std::size_t trials = 512;
  verify->add_option("--masked", masked, "Refined (masked) checkpoint")->required()->check(CLI::ExistingFile);
  verify->add_option("--compact", compact_path, "Compacted checkpoint")->required()->check(CLI::ExistingFile);
  verify->add_option("--trials", trials, "Random inputs");
  verify->add_option("--data", data, "Optional dataset for an accuracy comparison")->check(CLI::ExistingFile);

  auto* show = app.add_subcommand("print-config", "Print a preset RunConfig as JSON");
  preset_name = "hybrid";
  show->add_option("--preset", preset_name, "hybrid or all-linear");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    const std::uint64_t seed = g.seed.value_or(1);
    apma::save_dataset(out, apma::gen_dataset(seed, count, classes));
    nlohmann::json j = {{"out", out}, {"seed", seed}, {"count", count}, {"classes", classes}};
    std::string text = "wrote " + out + " (" + std::to_string(count) + " images, seed " +
                       std::to_string(seed) + ")\n";
    if (!heldout_out.empty()) {
      const auto hc = heldout_count ? heldout_count : count;
      apma::save_dataset(heldout_out, apma::gen_dataset(seed + 1, hc, classes));
      j["heldout"] = {{"out", heldout_out}, {"seed", seed + 1}, {"count", hc}};
      text += "wrote " + heldout_out + " (" + std::to_string(hc) + " images, seed " +
              std::to_string(seed + 1) + ")\n";
    }
    emit(g, j, text);
    return 0;
  }

  if (show->parsed()) {
    std::cout << apma::to_json(apma::preset(preset_name)).dump(2) << "\n";
    return 0;
  }

  if (search->parsed()) {
    auto cfg = apma::load_config(config_path);
    if (g.seed) cfg.seed = *g.seed;
    const auto data = splits_for(cfg);
    nlohmann::json epochs = nlohmann::json::array();
    std::vector<apma::InitLayerReport> init;
    if (!g.json) std::cout << "full model " << apma::compute_macs(cfg.model, apma::MaskSet::ones(cfg.model)).total << " MACs/image\n";
    auto st = apma::search(cfg, data, progress(g, epochs), &init, g.threads);
    apma::save_state(out, st);
    const auto budget = [&] {
      auto b = apma::compute_macs(st.spec, st.masks());
      b.target = st.target_macs;
      b.loss = apma::mac_loss(double(b.total), double(b.target), cfg.lambda);
      return b;
    }();
    std::string text;
    if (!init.empty()) text += "\nindicator initialization\n" + apma::init_report_text(init, cfg.tau);
    text += "\n" + apma::budget_text(budget) + "\nwrote " + out + "\n";
    emit(g, {{"epochs", epochs}, {"init", apma::to_json(init)}, {"budget", apma::to_json(budget)}, {"out", out}}, text);
    return 0;
  }

  if (refine->parsed()) {
    auto st = apma::load_state(in);
    const auto data = splits_for(st.config);
    nlohmann::json epochs = nlohmann::json::array();
    apma::refine(st, data, progress(g, epochs), g.threads);
    apma::save_state(out, st);
    emit(g, {{"epochs", epochs}, {"out", out}}, "wrote " + out + "\n");
    return 0;
  }

  if (recon->parsed()) {
    const auto st = apma::load_state(in);
    apma::EquivalenceReport rep;
    const auto compacted = apma::reconfigure(st, &rep);
    apma::save_state(out, compacted);
    std::string text = "equivalence: " + apma::equivalence_text(rep);
    text += "compact structure:\n";
    for (std::size_t b = 0; b < compacted.spec.blocks.size(); ++b) {
      const auto& blk = compacted.spec.blocks[b];
      text += "  " + apma::block_prefix(b) + " (" + apma::to_string(blk.kind) + ", " +
              std::to_string(blk.heads) + " heads): qk " + std::to_string(compacted.spec.qk_dim(b)) +
              ", v " + std::to_string(compacted.spec.v_dim(b)) + ", ffn " +
              std::to_string(blk.ffn_hidden) + "\n";
    }
    text += "wrote " + out + "\n";
    emit(g, {{"equivalence", apma::to_json(rep)}, {"spec", apma::to_json(compacted.spec)}, {"out", out}}, text);
    return 0;
  }

  if (eval->parsed()) {
    const auto st = apma::load_state(in);
    const auto ds = apma::load_dataset(data);
    apma::check_dataset(st.spec, ds, "dataset");
    const auto masks = st.masks();
    const double acc = apma::accuracy(st.spec, st.params, masks, ds, g.threads);
    auto budget = apma::compute_macs(st.spec, masks);
    budget.target = st.target_macs;
    if (budget.target > 0)
      budget.loss = apma::mac_loss(double(budget.total), double(budget.target), st.config.lambda);
    nlohmann::json j = {{"phase", apma::to_string(st.phase)}, {"accuracy", acc},
                        {"images", ds.count()}, {"budget", apma::to_json(budget)}};
    std::string text = "phase " + apma::to_string(st.phase) + ", accuracy " +
                       std::to_string(acc) + " over " + std::to_string(ds.count()) + " images\n";
    if (g.f64_oracle) {
      const double acc64 = apma::accuracy<double>(st.spec, st.params, masks, ds, g.threads);
      j["accuracy_f64"] = acc64;
      text += "64-bit oracle accuracy " + std::to_string(acc64) + "\n";
    }
    emit(g, j, text + apma::budget_text(budget));
    return 0;
  }

  if (insp->parsed()) {
    const auto rep = apma::inspect(apma::load_state(in));
    emit(g, apma::to_json(rep), apma::inspect_text(rep));
    return 0;
  }

  if (verify->parsed()) {
    const auto a = apma::load_state(masked);
    const auto b = apma::load_state(compact_path);
    if (b.phase != apma::Phase::compacted)
      throw apma::ContractError("--compact must name a compacted checkpoint");
    const auto masks = a.masks();
    const auto rep = apma::verify_equivalence(a.spec, a.params, masks, b.spec, b.params, trials);
    nlohmann::json j = {{"equivalence", apma::to_json(rep)}};
    std::string text = apma::equivalence_text(rep);
    if (g.f64_oracle) {
      const auto images = apma::random_images(a.spec, std::min<std::size_t>(trials, 256), 11);
      const auto ref = apma::predict(a.spec, a.params.cast<double>(), masks, images.cast<double>());
      const auto got = apma::predict(b.spec, b.params, apma::MaskSet::ones(b.spec), images);
      const double dev = apma::max_abs_diff(ref, got.cast<double>());
      j["f64_deviation"] = dev;
      text += "compact vs 64-bit masked oracle: max |logit diff| " + std::to_string(dev) + "\n";
    }
    if (!data.empty()) {
      const auto ds = apma::load_dataset(data);
      const double acc_a = apma::accuracy(a.spec, a.params, masks, ds, g.threads);
      const double acc_b = apma::accuracy(b.spec, b.params, apma::MaskSet::ones(b.spec), ds, g.threads);
      j["accuracy_masked"] = acc_a;
      j["accuracy_compact"] = acc_b;
      text += "accuracy masked " + std::to_string(acc_a) + ", compact " + std::to_string(acc_b) + "\n";
      if (acc_a != acc_b) throw apma::VerificationError("accuracies differ", "accuracy");
    }
    emit(g, j, text + "verified\n");
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const apma::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
