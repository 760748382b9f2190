// Copyright (c) 2026 The antkv Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// antkv: command-line driver for synthetic KV-cache quantization experiments.
//
// Exit codes: 0 success, 2 usage error, 3 input-format error, 4 numerical failure.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "antkv/antkv.hpp"

namespace fs = std::filesystem;
using antkv::harness::Dataset;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitFormat = 3;
constexpr int kExitNumerical = 4;

std::vector<antkv::VqConfig> parse_vqs(const std::vector<std::string>& names) {
  std::vector<antkv::VqConfig> out;
  for (const auto& n : names) out.push_back(antkv::VqConfig::parse(n));
  return out;
}

Dataset load_dataset(const fs::path& dir) {
  return antkv::harness::from_files(antkv::read_tensor_file(dir / "q.antv"),
                                    antkv::read_tensor_file(dir / "k.antv"),
                                    antkv::read_tensor_file(dir / "v.antv"));
}

void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  const auto files = antkv::harness::to_files(ds);
  antkv::write_tensor_file(dir / "q.antv", files.q);
  antkv::write_tensor_file(dir / "k.antv", files.k);
  antkv::write_tensor_file(dir / "v.antv", files.v);
}

antkv::harness::CodebookMap load_books(const fs::path& root, const std::vector<antkv::VqConfig>& vqs) {
  antkv::harness::CodebookMap books;
  for (const auto& vq : vqs) books.emplace(vq.name(), antkv::harness::load_head_codebooks(root / vq.name()));
  return books;
}

void emit(const nlohmann::json& report, const std::string& out, const std::string& csv) {
  const std::string text = report.dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    antkv::io::write_text(out, text);
  }
  if (!csv.empty()) antkv::io::write_text(csv, antkv::harness::records_to_csv(report));
}

/// Rejects empty list items, which CLI11 would otherwise read as 0.
const CLI::Validator kNonEmpty(
    [](std::string& s) { return s.empty() ? std::string("empty value") : std::string(); }, "NONEMPTY");

struct GenArgs {
  antkv::harness::GenOptions opt;
  std::string structure = "gaussian";
  std::string out;
};

struct DataArgs {
  std::string data;
  std::string structure = "heavy_hitter";
  std::size_t n = 256;
  std::size_t d = 64;
  std::size_t heads = 4;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"antkv: anchor-aware KV-cache vector quantization experiments"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Write synthetic Q, K, V tensor files");
  gen_cmd->add_option("--seed", gen.opt.seed, "Random seed");
  gen_cmd->add_option("--n", gen.opt.n, "Tokens per head")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--d", gen.opt.d, "Head dimension")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--heads", gen.opt.heads, "Number of heads")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--structure", gen.structure, "gaussian | clustered | heavy_hitter");
  gen_cmd->add_option("--planted", gen.opt.planted, "heavy_hitter: planted tokens (0 = 1% of n)");
  gen_cmd->add_option("--clusters", gen.opt.clusters, "clustered: sub-vector centres");
  gen_cmd->add_option("--cluster-dsub", gen.opt.cluster_dsub, "clustered: centre width");
  gen_cmd->add_option("--out", gen.out, "Output directory (q.antv, k.antv, v.antv)")->required();

  std::vector<std::string> cal_data;
  std::string cal_out, cal_sharing = "shared";
  std::vector<std::string> cal_vq{"d8m256"};
  antkv::harness::CalibrateOptions cal;
  bool cal_non_causal = false, cal_no_rope = false, cal_uniform = false, cal_pool = false;
  auto* cal_cmd = app.add_subcommand("calibrate", "Learn token-aware K and V codebooks");
  cal_cmd->add_option("--data", cal_data, "Directories with q.antv, k.antv, v.antv (repeatable)")
      ->required()
      ->delimiter(',');
  cal_cmd->add_option("--vq", cal_vq, "VQ settings in dNmM notation")->delimiter(',');
  cal_cmd->add_option("--seed", cal.seed, "Random seed");
  cal_cmd->add_option("--sharing", cal_sharing, "shared | per_position");
  cal_cmd->add_option("--max-iter", cal.max_iter, "k-means iteration cap");
  cal_cmd->add_option("--tol", cal.tol, "Relative objective tolerance");
  cal_cmd->add_option("--epsilon-floor", cal.epsilon_floor, "Weight floor");
  cal_cmd->add_flag("--causal", "Causal surrogate loss (default)");
  cal_cmd->add_flag("--non-causal", cal_non_causal, "Non-causal surrogate loss");
  cal_cmd->add_flag("--no-rope", cal_no_rope, "Surrogate loss without RoPE");
  cal_cmd->add_flag("--uniform-weights", cal_uniform, "Plain k-means instead of gradient weights");
  cal_cmd->add_flag("--pool-heads", cal_pool, "One codebook set for all heads");
  cal_cmd->add_option("--out", cal_out, "Output directory, one subdirectory per VQ setting")->required();

  std::string ev_data, ev_books, ev_out, ev_csv, ev_policy = "combined", ev_mode = "joint";
  std::vector<std::string> ev_vq{"d8m256"};
  antkv::harness::EvalOptions ev;
  bool ev_no_rope = false, ev_no_per_token = false;
  auto* ev_cmd = app.add_subcommand("eval", "Evaluate quantized prefill over a grid");
  ev_cmd->add_option("--data", ev_data, "Directory with q.antv, k.antv, v.antv")->required();
  ev_cmd->add_option("--codebooks", ev_books, "Calibration output directory")->required();
  ev_cmd->add_option("--vq", ev_vq, "VQ settings in dNmM notation")->delimiter(',');
  ev_cmd->add_option("--anchors", ev.anchor_fractions, "Anchor fractions")
      ->delimiter(',')
      ->check(kNonEmpty)
      ->check(CLI::Range(0.0, 1.0));
  ev_cmd->add_option("--trials", ev.trials, "Random-anchor control trials per grid point");
  ev_cmd->add_option("--seed", ev.seed, "Random seed for controls");
  ev_cmd->add_option("--window", ev.window, "Full-precision window size");
  ev_cmd->add_option("--policy", ev_policy, "by_k | by_v | combined");
  ev_cmd->add_option("--per-token-mode", ev_mode, "joint | k_only | v_only");
  ev_cmd->add_flag("--no-per-token", ev_no_per_token, "Skip the per-token error profile");
  ev_cmd->add_flag("--causal", "Causal prefill (always on)");
  ev_cmd->add_flag("--no-rope", ev_no_rope, "Attention without RoPE");
  ev_cmd->add_flag("--timing", ev.timing, "Record runtime_ms");
  ev_cmd->add_option("--out", ev_out, "Report path (stdout when omitted)");
  ev_cmd->add_option("--csv", ev_csv, "Also write records as CSV");

  std::string rs_k, rs_out, rs_vq = "d8m256";
  std::optional<std::int64_t> rs_stride;
  antkv::harness::RopeStatsOptions rs;
  auto* rs_cmd = app.add_subcommand("rope-stats", "Compare pre- and post-RoPE key clustering");
  rs_cmd->add_option("--k", rs_k, "K tensor file")->required();
  rs_cmd->add_option("--vq", rs_vq, "VQ setting in dNmM notation");
  rs_cmd->add_option("--seed", rs.seed, "Random seed");
  rs_cmd->add_option("--theta", rs.theta_base, "RoPE frequency base");
  rs_cmd->add_option("--max-iter", rs.max_iter, "k-means iteration cap");
  rs_cmd->add_option("--position-stride", rs_stride, "Override positions with t * stride");
  rs_cmd->add_option("--out", rs_out, "Report path (stdout when omitted)");

  DataArgs sw_data;
  std::string sw_books, sw_out, sw_csv, sw_policy = "combined";
  std::vector<std::string> sw_vq{"d8m256"};
  antkv::harness::SweepOptions sw;
  sw.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  bool sw_no_rope = false;
  auto* sw_cmd = app.add_subcommand("anchor-sweep", "Error across anchor fractions and seeds");
  sw_cmd->add_option("--data", sw_data.data, "Fixed input directory (otherwise generated per seed)");
  sw_cmd->add_option("--structure", sw_data.structure, "Generated data structure");
  sw_cmd->add_option("--n", sw_data.n, "Generated tokens per head");
  sw_cmd->add_option("--d", sw_data.d, "Generated head dimension");
  sw_cmd->add_option("--heads", sw_data.heads, "Generated heads");
  sw_cmd->add_option("--codebooks", sw_books, "Calibration output directory")->required();
  sw_cmd->add_option("--vq", sw_vq, "VQ settings in dNmM notation")->delimiter(',');
  sw_cmd->add_option("--anchors,--fractions", sw.fractions, "Anchor fractions")
      ->delimiter(',')
      ->check(kNonEmpty)
      ->check(CLI::Range(0.0, 1.0));
  sw_cmd->add_option("--seeds", sw.seeds, "Seeds")->delimiter(',');
  sw_cmd->add_option("--window", sw.window, "Full-precision window size");
  sw_cmd->add_option("--policy", sw_policy, "by_k | by_v | combined");
  sw_cmd->add_flag("--causal", "Causal prefill (always on)");
  sw_cmd->add_flag("--no-rope", sw_no_rope, "Attention without RoPE");
  sw_cmd->add_option("--out", sw_out, "Report path (stdout when omitted)");
  sw_cmd->add_option("--csv", sw_csv, "Also write records as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    (void)app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen_cmd) {
      gen.opt.structure = antkv::harness::parse_structure(gen.structure);
      write_dataset(antkv::harness::generate(gen.opt), gen.out);
    } else if (*cal_cmd) {
      cal.sharing = antkv::parse_sharing(cal_sharing);
      cal.causal = !cal_non_causal;
      cal.use_rope = !cal_no_rope;
      cal.token_aware = !cal_uniform;
      const auto vqs = parse_vqs(cal_vq);
      std::vector<Dataset> data;
      for (const auto& dir : cal_data) data.push_back(load_dataset(dir));
      nlohmann::json reports = nlohmann::json::array();
      for (const auto& vq : vqs) {
        cal.vq = vq;
        const auto outcome = antkv::harness::calibrate(data, cal, cal_pool);
        const fs::path dir = fs::path(cal_out) / vq.name();
        antkv::harness::save_head_codebooks(antkv::harness::codebooks_of(outcome), dir);
        antkv::io::write_text(dir / "report.json", outcome.report.dump(2) + "\n");
        reports.push_back(outcome.report);
      }
      std::cout << reports.dump(2) << "\n";
    } else if (*ev_cmd) {
      ev.vqs = parse_vqs(ev_vq);
      ev.policy = antkv::parse_anchor_policy(ev_policy);
      ev.per_token_mode = antkv::harness::parse_per_token_mode(ev_mode);
      ev.per_token = !ev_no_per_token;
      ev.use_rope = !ev_no_rope;
      const Dataset data = load_dataset(ev_data);
      emit(antkv::harness::evaluate(data, load_books(ev_books, ev.vqs), ev), ev_out, ev_csv);
    } else if (*rs_cmd) {
      rs.vq = antkv::VqConfig::parse(rs_vq);
      const antkv::TensorFile kf = antkv::read_tensor_file(rs_k);
      std::vector<antkv::HeadTensor> heads;
      for (std::size_t h = 0; h < kf.heads(); ++h) heads.push_back(kf.head(h));
      std::vector<std::int64_t> pos = kf.token_positions();
      if (rs_stride) {
        antkv::detail::require(*rs_stride >= 0, "position stride must be >= 0");
        for (std::size_t t = 0; t < pos.size(); ++t) pos[t] = static_cast<std::int64_t>(t) * *rs_stride;
      }
      emit(antkv::harness::rope_stats(heads, pos, rs), rs_out, "");
    } else if (*sw_cmd) {
      sw.vqs = parse_vqs(sw_vq);
      sw.policy = antkv::parse_anchor_policy(sw_policy);
      sw.use_rope = !sw_no_rope;
      antkv::harness::DataProvider provider;
      if (!sw_data.data.empty()) {
        const Dataset fixed = load_dataset(sw_data.data);
        provider = [fixed](std::uint64_t) { return fixed; };
      } else {
        antkv::harness::GenOptions g;
        g.structure = antkv::harness::parse_structure(sw_data.structure);
        g.n = sw_data.n;
        g.d = sw_data.d;
        g.heads = sw_data.heads;
        provider = [g](std::uint64_t seed) {
          auto opt = g;
          opt.seed = seed;
          return antkv::harness::generate(opt);
        };
      }
      emit(antkv::harness::anchor_sweep(provider, load_books(sw_books, sw.vqs), sw), sw_out, sw_csv);
    }
  } catch (const antkv::FormatError& e) {
    std::cerr << "antkv: " << e.what() << "\n";
    return kExitFormat;
  } catch (const antkv::NumericalError& e) {
    std::cerr << "antkv: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const antkv::InvalidArgument& e) {
    std::cerr << "antkv: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "antkv: " << e.what() << "\n";
    return kExitFormat;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "antkv: " << e.what() << "\n";
    return kExitFormat;
  }
  return 0;
}
