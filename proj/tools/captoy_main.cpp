// Command-line experiment runner: dataset generation, training runs with
// resolved round-trippable configs, capacity reports, bound verification,
// style transfer / prior sampling, sequence comparison, and grid sweeps.
//
// Exit codes: 0 success, 1 usage/config/data error, 2 runtime failure,
// 3 bound verification failure.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "captoy/capacity.hpp"
#include "captoy/config.hpp"
#include "captoy/mcd.hpp"
#include "captoy/model.hpp"
#include "captoy/objective.hpp"
#include "captoy/tasks.hpp"
#include "captoy/toy_data.hpp"
#include "captoy/wav.hpp"

namespace fs = std::filesystem;
using namespace captoy;

namespace {

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw DataError("write failed for " + path.string());
}

void require_compatible(const ModelConfig& cfg, const ToySpec& spec) {
  if (cfg.channels != spec.channels || cfg.num_text_classes != spec.num_text_classes ||
      cfg.num_speakers != spec.num_speakers)
    throw DataError("dataset dimensions do not match the checkpoint (channels " +
                    std::to_string(spec.channels) + " vs " + std::to_string(cfg.channels) +
                    ", classes " + std::to_string(spec.num_text_classes) + " vs " +
                    std::to_string(cfg.num_text_classes) + ", speakers " +
                    std::to_string(spec.num_speakers) + " vs " +
                    std::to_string(cfg.num_speakers) + ")");
}

LatentLevel parse_level(const std::string& s) {
  if (s == "flat") return LatentLevel::flat;
  if (s == "via_z_h") return LatentLevel::via_z_h;
  if (s == "via_z_l") return LatentLevel::via_z_l;
  throw ConfigError("unknown latent level: " + s);
}

Utterance as_utterance(Matrix frames, int y_t, int y_s, int channels) {
  Utterance u;
  u.frames = std::move(frames);
  u.y_t = y_t;
  u.y_s = y_s;
  u.truth.amplitude = 1.0;
  u.truth.tempo = 1.0;
  u.truth.offset.assign(static_cast<std::size_t>(channels), 0.0);
  return u;
}

void print_checks(std::ostream& os, const std::vector<std::pair<std::string, bool>>& checks,
                  const std::vector<std::string>& failures) {
  std::size_t f = 0;
  for (const auto& [name, held] : checks) {
    if (held) {
      os << "[PASS] " << name << "\n";
    } else {
      os << "[FAIL] " << (f < failures.size() ? failures[f] : name) << "\n";
      ++f;
    }
  }
}

//============================================================================
// Training runs (shared by the train and sweep commands)
//============================================================================

struct TrainRun {
  RunConfig rc;  // fully resolved, as written to the run directory
  TrainResult result;
  std::optional<Model> model;
  Dataset holdout;
  double recon_holdout = 0.0;
  double r_avg_holdout = 0.0;
  bool has_r_avg = false;
};

// Resolves the dataset, writes the run directory (config.txt, metrics.csv,
// model.ckpt, eval.txt), and returns the trained model plus holdout scores.
TrainRun run_training(RunConfig rc, const fs::path& out_dir) {
  Dataset all;
  if (!rc.dataset_path.empty()) {
    auto [spec, loaded] = load_dataset(rc.dataset_path);
    rc.data = spec;
    all = std::move(loaded);
  } else {
    rc.data.validate_and_default();
    all = generate_dataset(rc.data, rc.n_utterances);
  }
  rc.model.channels = rc.data.channels;
  rc.model.num_text_classes = rc.data.num_text_classes;
  rc.model.num_speakers = rc.data.num_speakers;
  rc.model.validate();
  if (!(rc.holdout_fraction >= 0.0 && rc.holdout_fraction < 1.0))
    throw ConfigError("data.holdout_fraction must lie in [0, 1)");

  TrainRun run;
  Dataset train_set;
  if (rc.holdout_fraction > 0.0) {
    auto [head, tail] = split(all, 1.0 - rc.holdout_fraction);
    train_set = std::move(head);
    run.holdout = std::move(tail);
  } else {
    train_set = all;  // nothing held out; evaluate on the training data
    run.holdout = std::move(all);
  }
  if (train_set.empty() || run.holdout.empty())
    throw ConfigError("holdout split left an empty partition");

  fs::create_directories(out_dir);
  {
    std::ofstream os(out_dir / "config.txt");
    if (!os) throw DataError("cannot open " + (out_dir / "config.txt").string() + " for writing");
    write_config(os, run_config_to_map(rc));
  }

  run.model.emplace(rc.model, rc.train.seed);
  run.result = train(*run.model, train_set, rc.target(), rc.train);

  const bool variational = rc.model.bottleneck == Bottleneck::variational;
  {
    std::ofstream os(out_dir / "metrics.csv");
    if (!os) throw DataError("cannot open " + (out_dir / "metrics.csv").string() + " for writing");
    write_metrics_csv(os, run.result.metrics, variational, rc.model.hierarchical);
  }
  run.model->save_file((out_dir / "model.ckpt").string());

  run.recon_holdout = evaluate_recon(*run.model, run.holdout);
  if (variational && !rc.model.hierarchical) {
    run.r_avg_holdout = evaluate_r_avg(*run.model, run.holdout);
    run.has_r_avg = true;
  }

  std::ostringstream ev;
  ev << "completed_steps = " << run.result.completed_steps << "\n";
  ev << "aborted = " << (run.result.aborted ? 1 : 0) << "\n";
  ev << "recon_holdout = " << format_double(run.recon_holdout) << "\n";
  if (run.has_r_avg) ev << "r_avg_holdout = " << format_double(run.r_avg_holdout) << "\n";
  if (variational) {
    if (rc.model.hierarchical) {
      ev << "final_beta_h = " << format_double(run.result.final_beta_h) << "\n";
      ev << "final_beta_l = " << format_double(run.result.final_beta_l) << "\n";
    } else {
      ev << "final_beta = " << format_double(run.result.final_beta) << "\n";
    }
  }
  write_text_file(out_dir / "eval.txt", ev.str());

  run.rc = std::move(rc);
  return run;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::optional<std::uint64_t> seed, const std::string& data_override) {
  RunConfig rc = load_run_config(config_path);
  if (seed) rc.train.seed = *seed;
  if (!data_override.empty()) rc.dataset_path = data_override;

  const TrainRun run = run_training(std::move(rc), out_dir);
  std::ifstream ev(fs::path(out_dir) / "eval.txt");
  std::cout << ev.rdbuf();
  std::cout << "run_dir = " << out_dir << "\n";
  if (run.result.aborted) {
    std::cerr << "error: training aborted on a non-finite loss at step "
              << run.result.completed_steps << "; checkpoint holds the last finite step\n";
    return 2;
  }
  return 0;
}

//============================================================================
// Dataset generation
//============================================================================

int cmd_gen_data(const std::string& config_path, const std::string& out_path,
                 std::optional<int> n, std::optional<std::uint64_t> seed) {
  RunConfig rc;
  if (!config_path.empty()) rc = load_run_config(config_path);
  if (n) rc.n_utterances = *n;
  if (seed) rc.data.rng_seed = *seed;
  rc.data.validate_and_default();

  const Dataset data = generate_dataset(rc.data, rc.n_utterances);
  save_dataset(out_path, rc.data, data);
  std::cout << "wrote " << data.size() << " utterances (channels=" << rc.data.channels
            << ", text_classes=" << rc.data.num_text_classes
            << ", speakers=" << rc.data.num_speakers << ") to " << out_path << "\n";
  return 0;
}

//============================================================================
// Capacity report and bound verification
//============================================================================

int cmd_eval_capacity(const std::string& model_path, const std::string& data_path,
                      const std::string& method, int grid, int mc_samples,
                      std::uint64_t seed, double tolerance, const std::string& out_path) {
  const Model model = Model::load_file(model_path);
  if (model.config().hierarchical)
    throw ConfigError("eval-capacity reports on flat checkpoints; use verify-bounds for "
                      "hierarchical ones");
  const auto [spec, data] = load_dataset(data_path);
  require_compatible(model.config(), spec);

  const std::vector<DiagGaussian> posteriors = collect_posteriors(model, data);
  CapacityReport rep;
  if (method == "monte_carlo") {
    rep = mi_monte_carlo(posteriors, mc_samples, seed);
  } else {
    QuadratureOptions opts;
    opts.points_per_axis = grid;
    opts.tolerance = tolerance;
    rep = mi_quadrature(posteriors, opts);
  }
  write_capacity_report(std::cout, rep);
  if (!out_path.empty()) {
    std::ostringstream os;
    write_capacity_report(os, rep);
    write_text_file(out_path, os.str());
  }
  return 0;
}

int cmd_verify_bounds(const std::string& model_path, const std::string& data_path,
                      const std::string& method, int grid, int samples, int joint_samples,
                      std::uint64_t seed, double tolerance) {
  const Model model = Model::load_file(model_path);
  const auto [spec, data] = load_dataset(data_path);
  require_compatible(model.config(), spec);

  bool pass = false;
  if (model.config().hierarchical) {
    HierBoundOptions opts;
    if (grid > 0) opts.grid_points = grid;
    if (samples > 0) opts.marginal_samples = opts.rate_samples = samples;
    if (joint_samples > 0) opts.joint_mc_samples = joint_samples;
    opts.seed = seed;
    opts.tolerance = tolerance;
    const HierBoundCheck chk = verify_hier_bounds(model, data, opts);
    const HierQuantities& q = chk.q;
    std::cout << "r_avg_h = " << format_double(q.r_avg_h) << "\n"
              << "r_avg_h_se = " << format_double(q.r_avg_h_se) << "\n"
              << "r_avg_l = " << format_double(q.r_avg_l) << "\n"
              << "r_avg_l_se = " << format_double(q.r_avg_l_se) << "\n"
              << "i_q_zh = " << format_double(q.i_q_zh) << "\n"
              << "i_q_zh_bound = " << format_double(q.i_q_zh_bound) << "\n"
              << "i_q_zl = " << format_double(q.i_q_zl) << "\n"
              << "i_q_zl_bound = " << format_double(q.i_q_zl_bound) << "\n"
              << "i_q_joint = " << format_double(q.i_q_joint) << "\n"
              << "i_q_joint_se = " << format_double(q.i_q_joint_se) << "\n";
    print_checks(std::cout, chk.checks, chk.failures);
    pass = chk.pass;
  } else {
    BoundCheck chk;
    if (method == "monte_carlo") {
      chk = check_flat_report(
          mi_monte_carlo(collect_posteriors(model, data), samples > 0 ? samples : 1000, seed));
    } else {
      QuadratureOptions opts;
      if (grid > 0) opts.points_per_axis = grid;
      opts.tolerance = tolerance;
      chk = verify_flat_bounds(model, data, opts);
    }
    write_capacity_report(std::cout, chk.report);
    print_checks(std::cout, chk.checks, chk.failures);
    pass = chk.pass;
  }
  std::cout << (pass ? "bounds: OK" : "bounds: VIOLATION") << "\n";
  return pass ? 0 : 3;
}

//============================================================================
// Transfer and prior sampling
//============================================================================

int cmd_transfer(const std::string& model_path, const std::string& data_path,
                 const std::string& out_dir, const std::string& level_str, int num_samples,
                 std::uint64_t seed, int limit, int text_override, int speaker_override) {
  const Model model = Model::load_file(model_path);
  auto [spec, data] = load_dataset(data_path);
  require_compatible(model.config(), spec);
  if (limit > 0 && static_cast<std::size_t>(limit) < data.size())
    data.resize(static_cast<std::size_t>(limit));

  const LatentLevel level = parse_level(level_str);
  const int max_len = free_running_cap(data);

  fs::create_directories(out_dir);
  std::ostringstream csv;
  csv << "index,y_t,y_s,ref_mcd,inter_mcd\n";
  Dataset generated;
  double sum_ref = 0.0, sum_inter = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    TransferJob job;
    job.reference = data[i];
    job.target_y_t = text_override >= 0 ? text_override : data[i].y_t;
    job.target_y_s = speaker_override >= 0 ? speaker_override : data[i].y_s;
    job.latent_level = level;
    job.num_samples = num_samples;
    job.seed = mix_seed(seed, static_cast<std::uint64_t>(i));
    const std::vector<Matrix> outs = transfer(model, job, max_len);

    const double ref_mcd = mcd_dtw(outs.front(), data[i].frames);
    double inter = 0.0;
    if (outs.size() > 1) {
      for (std::size_t k = 1; k < outs.size(); ++k) inter += mcd_dtw(outs.front(), outs[k]);
      inter /= static_cast<double>(outs.size() - 1);
    }
    sum_ref += ref_mcd;
    sum_inter += inter;
    csv << i << ',' << job.target_y_t << ',' << job.target_y_s << ','
        << format_double(ref_mcd) << ',' << format_double(inter) << "\n";
    for (const Matrix& m : outs)
      generated.push_back(as_utterance(m, job.target_y_t, job.target_y_s, spec.channels));
  }

  write_text_file(fs::path(out_dir) / "transfer.csv", csv.str());
  save_dataset((fs::path(out_dir) / "generated.bin").string(), spec, generated);

  const double n = static_cast<double>(data.size());
  std::cout << "level = " << level_str << "\n"
            << "count = " << data.size() << "\n"
            << "ref_dist = " << format_double(sum_ref / n) << "\n"
            << "inter_sample = " << format_double(sum_inter / n) << "\n"
            << "run_dir = " << out_dir << "\n";
  return 0;
}

int cmd_sample(const std::string& model_path, const std::string& out_dir,
               const std::string& data_path, int y_t, int y_s, int num_samples,
               std::uint64_t seed, int max_len) {
  const Model model = Model::load_file(model_path);
  const ModelConfig& cfg = model.config();
  if (y_t < 0 || y_t >= cfg.num_text_classes)
    throw ConfigError("--text out of range [0, " + std::to_string(cfg.num_text_classes) + ")");
  if (y_s < 0 || y_s >= cfg.num_speakers)
    throw ConfigError("--speaker out of range [0, " + std::to_string(cfg.num_speakers) + ")");

  ToySpec spec;
  spec.channels = cfg.channels;
  spec.num_text_classes = cfg.num_text_classes;
  spec.num_speakers = cfg.num_speakers;
  int cap = max_len;
  if (!data_path.empty()) {
    auto [dspec, data] = load_dataset(data_path);
    require_compatible(cfg, dspec);
    spec = dspec;
    if (cap <= 0) cap = free_running_cap(data);
  }
  spec.validate_and_default();
  if (cap <= 0) throw ConfigError("pass --max-len or --data to bound the free-running decode");

  const std::vector<Matrix> outs = prior_sample(model, y_t, y_s, num_samples, seed, cap);

  fs::create_directories(out_dir);
  std::ostringstream csv;
  csv << "index,y_t,y_s,frames\n";
  Dataset generated;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    csv << i << ',' << y_t << ',' << y_s << ',' << outs[i].rows() << "\n";
    generated.push_back(as_utterance(outs[i], y_t, y_s, spec.channels));
  }
  write_text_file(fs::path(out_dir) / "samples.csv", csv.str());
  save_dataset((fs::path(out_dir) / "samples.bin").string(), spec, generated);
  std::cout << "count = " << outs.size() << "\n"
            << "run_dir = " << out_dir << "\n";
  return 0;
}

//============================================================================
// Sequence comparison
//============================================================================

bool is_wav_path(const std::string& path) {
  const std::string ext = fs::path(path).extension().string();
  return ext == ".wav" || ext == ".WAV";
}

int cmd_mcd_dtw(const std::string& a_path, const std::string& b_path, const std::string& out_path,
                double warp_penalty, bool conventional, bool per_frame_by_max_len) {
  McdOptions opts;
  opts.warp_penalty = warp_penalty;
  opts.conventional_scale = conventional;
  opts.per_frame_by_max_len = per_frame_by_max_len;

  std::ostringstream csv;
  csv << "id_a,id_b,mcd_dtw\n";
  if (is_wav_path(a_path) != is_wav_path(b_path))
    throw ConfigError("cannot compare a WAV file with a dataset file");
  if (is_wav_path(a_path)) {
    const WavAudio a = wav_read_file(a_path);
    const WavAudio b = wav_read_file(b_path);
    if (a.sample_rate != b.sample_rate)
      throw DataError("sample rates differ: " + std::to_string(a.sample_rate) + " vs " +
                      std::to_string(b.sample_rate));
    csv << a_path << ',' << b_path << ','
        << format_double(mcd_dtw_audio(a.samples, b.samples, a.sample_rate, opts)) << "\n";
  } else {
    const auto [spec_a, data_a] = load_dataset(a_path);
    const auto [spec_b, data_b] = load_dataset(b_path);
    if (spec_a.channels != spec_b.channels)
      throw DataError("channel counts differ: " + std::to_string(spec_a.channels) + " vs " +
                      std::to_string(spec_b.channels));
    const std::size_t n = std::min(data_a.size(), data_b.size());
    if (n == 0) throw DataError("no utterance pairs to compare");
    for (std::size_t i = 0; i < n; ++i)
      csv << i << ',' << i << ',' << format_double(mcd_dtw(data_a[i], data_b[i], opts)) << "\n";
  }

  if (out_path.empty()) {
    std::cout << csv.str();
  } else {
    write_text_file(out_path, csv.str());
    std::cout << "wrote " << out_path << "\n";
  }
  return 0;
}

//============================================================================
// Sweeps
//============================================================================

std::vector<double> parse_sweep_list(const std::string& value, const std::string& key) {
  std::vector<double> out;
  std::istringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = captoy::detail::trim(item);
    if (item.empty()) continue;
    char* rest = nullptr;
    const double v = std::strtod(item.c_str(), &rest);
    if (rest == item.c_str() || *rest != '\0')
      throw ConfigError(key + ": not a number list: " + value);
    out.push_back(v);
  }
  return out;
}

std::vector<std::pair<double, double>> parse_sweep_pairs(const std::string& value,
                                                         const std::string& key) {
  std::vector<std::pair<double, double>> out;
  std::istringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = captoy::detail::trim(item);
    if (item.empty()) continue;
    const std::size_t colon = item.find(':');
    if (colon == std::string::npos)
      throw ConfigError(key + ": expected h:l pairs, got " + value);
    char* rest = nullptr;
    const std::string hs = item.substr(0, colon), ls = item.substr(colon + 1);
    const double h = std::strtod(hs.c_str(), &rest);
    if (rest == hs.c_str() || *rest != '\0') throw ConfigError(key + ": bad pair " + item);
    const double l = std::strtod(ls.c_str(), &rest);
    if (rest == ls.c_str() || *rest != '\0') throw ConfigError(key + ": bad pair " + item);
    out.emplace_back(h, l);
  }
  return out;
}

std::string sanitize_csv(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  return s;
}

struct SweepCell {
  std::string name;
  RunConfig rc;
  bool fixed_beta = false;
  double beta = 0.0;
  bool done = false;
  std::string error;
  long completed_steps = 0;
  double recon_holdout = 0.0, r_avg_holdout = 0.0;
  bool has_r_avg = false;
  double final_beta = 0.0, final_beta_h = 0.0, final_beta_l = 0.0;
  bool has_transfer = false;
  double ref_h = 0.0, inter_h = 0.0, ref_l = 0.0, inter_l = 0.0;
};

int cmd_sweep(const std::string& config_path, const std::string& out_dir, int jobs,
              std::optional<std::uint64_t> seed, int transfer_samples) {
  ConfigMap map;
  {
    std::ifstream is(config_path);
    if (!is) throw ConfigError("cannot open " + config_path);
    map = parse_config(is);
  }
  RunConfig base = parse_run_config(map);
  if (seed) base.train.seed = *seed;

  auto sweep_value = [&](const std::string& key) {
    const auto it = map.find(key);
    return it == map.end() ? std::string() : it->second;
  };
  const std::vector<double> c_list = parse_sweep_list(sweep_value("sweep.c_list"), "sweep.c_list");
  const std::vector<std::pair<double, double>> c_pairs =
      parse_sweep_pairs(sweep_value("sweep.c_pairs"), "sweep.c_pairs");
  const std::vector<double> dim_list =
      parse_sweep_list(sweep_value("sweep.latent_dim_list"), "sweep.latent_dim_list");
  const std::vector<double> beta_list =
      parse_sweep_list(sweep_value("sweep.fixed_beta_list"), "sweep.fixed_beta_list");
  for (const auto& [key, value] : map) {
    (void)value;
    if (key.rfind("sweep.", 0) != 0) continue;
    if (key != "sweep.c_list" && key != "sweep.c_pairs" && key != "sweep.latent_dim_list" &&
        key != "sweep.fixed_beta_list")
      throw ConfigError("unknown config key: " + key);
  }
  if (!c_list.empty() && base.model.hierarchical)
    throw ConfigError("sweep.c_list applies to flat models; use sweep.c_pairs");
  if (!c_pairs.empty() && !base.model.hierarchical)
    throw ConfigError("sweep.c_pairs requires model.hierarchical = 1");

  // Rate axis: one cell per capacity (or capacity pair, or fixed beta value);
  // crossed with the latent dimension axis.
  struct RateVariant {
    bool fixed_beta = false;
    double beta = 0.0, c = 0.0, c_h = 0.0, c_l = 0.0;
  };
  std::vector<RateVariant> rates;
  for (const double c : c_list) rates.push_back({false, 0.0, c, base.c_h, base.c_l});
  for (const auto& [h, l] : c_pairs) rates.push_back({false, 0.0, base.c, h, l});
  for (const double b : beta_list) rates.push_back({true, b, base.c, base.c_h, base.c_l});
  if (rates.empty())
    rates.push_back({base.fixed_beta, base.train.fixed_beta_value, base.c, base.c_h, base.c_l});

  std::vector<int> dims;
  if (dim_list.empty()) {
    dims.push_back(base.model.latent_dim);
  } else {
    for (const double d : dim_list) {
      const int dim = static_cast<int>(d);
      if (static_cast<double>(dim) != d || dim < 1)
        throw ConfigError("sweep.latent_dim_list: bad dimension");
      dims.push_back(dim);
    }
  }

  fs::create_directories(out_dir);
  std::string data_path;
  if (!base.dataset_path.empty()) {
    data_path = fs::absolute(base.dataset_path).string();
  } else {
    base.data.validate_and_default();
    const Dataset data = generate_dataset(base.data, base.n_utterances);
    data_path = fs::absolute(fs::path(out_dir) / "dataset.bin").string();
    save_dataset(data_path, base.data, data);
  }

  std::vector<SweepCell> cells;
  for (const int dim : dims) {
    for (const RateVariant& rv : rates) {
      SweepCell cell;
      cell.rc = base;
      cell.rc.dataset_path = data_path;
      cell.rc.model.latent_dim = dim;
      cell.rc.fixed_beta = rv.fixed_beta;
      cell.rc.train.fixed_beta = rv.fixed_beta;
      if (rv.fixed_beta) {
        cell.rc.train.fixed_beta_value = rv.beta;
        cell.rc.train.fixed_beta_h = rv.beta;
        cell.rc.train.fixed_beta_l = rv.beta;
      }
      cell.rc.c = rv.c;
      cell.rc.c_h = rv.c_h;
      cell.rc.c_l = rv.c_l;
      cell.fixed_beta = rv.fixed_beta;
      cell.beta = rv.beta;
      cell.name = "cell_" + std::to_string(cells.size());
      cells.push_back(std::move(cell));
    }
  }

  std::atomic<std::size_t> next{0};
  std::mutex io;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      SweepCell& cell = cells[i];
      try {
        TrainRun run = run_training(cell.rc, fs::path(out_dir) / cell.name);
        cell.completed_steps = run.result.completed_steps;
        cell.recon_holdout = run.recon_holdout;
        cell.r_avg_holdout = run.r_avg_holdout;
        cell.has_r_avg = run.has_r_avg;
        cell.final_beta = run.result.final_beta;
        cell.final_beta_h = run.result.final_beta_h;
        cell.final_beta_l = run.result.final_beta_l;
        if (run.result.aborted) {
          cell.error = "training aborted on a non-finite loss at step " +
                       std::to_string(run.result.completed_steps);
        } else {
          if (cell.rc.model.hierarchical &&
              cell.rc.model.bottleneck == Bottleneck::variational) {
            TransferEvalOptions topts;
            topts.num_samples = transfer_samples;
            topts.seed = cell.rc.train.seed;
            topts.latent_level = LatentLevel::via_z_h;
            const TransferSummary via_h = evaluate_transfer(*run.model, run.holdout, topts);
            topts.latent_level = LatentLevel::via_z_l;
            const TransferSummary via_l = evaluate_transfer(*run.model, run.holdout, topts);
            cell.ref_h = via_h.ref_dist;
            cell.inter_h = via_h.inter_sample;
            cell.ref_l = via_l.ref_dist;
            cell.inter_l = via_l.inter_sample;
            cell.has_transfer = true;
          }
          cell.done = true;
        }
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      std::lock_guard<std::mutex> lock(io);
      if (cell.done) {
        std::cout << cell.name << ": ok (recon_holdout="
                  << format_double(cell.recon_holdout) << ")\n";
      } else {
        std::cout << cell.name << ": FAILED (" << cell.error << ")\n";
      }
    }
  };
  const int workers =
      std::max(1, std::min(jobs, static_cast<int>(cells.size())));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();

  std::ostringstream csv;
  csv << "cell,latent_dim,hierarchical,fixed_beta,beta,c,c_h,c_l,status,completed_steps,"
         "recon_holdout,r_avg,final_beta,final_beta_h,final_beta_l,"
         "ref_mcd_via_z_h,inter_mcd_via_z_h,ref_mcd_via_z_l,inter_mcd_via_z_l\n";
  bool all_ok = true;
  for (const SweepCell& cell : cells) {
    const bool hier = cell.rc.model.hierarchical;
    const bool variational = cell.rc.model.bottleneck == Bottleneck::variational;
    csv << cell.name << ',' << cell.rc.model.latent_dim << ',' << (hier ? 1 : 0) << ','
        << (cell.fixed_beta ? 1 : 0) << ',';
    if (cell.fixed_beta) csv << format_double(cell.beta);
    csv << ',';
    if (!hier && variational && !cell.fixed_beta) csv << format_double(cell.rc.c);
    csv << ',';
    if (hier && !cell.fixed_beta)
      csv << format_double(cell.rc.c_h) << ',' << format_double(cell.rc.c_l) << ',';
    else
      csv << ",,";
    if (cell.done) {
      csv << "ok," << cell.completed_steps << ',' << format_double(cell.recon_holdout) << ',';
      if (cell.has_r_avg) csv << format_double(cell.r_avg_holdout);
      csv << ',';
      if (variational && !cell.fixed_beta) {
        if (hier)
          csv << ',' << format_double(cell.final_beta_h) << ','
              << format_double(cell.final_beta_l) << ',';
        else
          csv << format_double(cell.final_beta) << ",,,";
      } else {
        csv << ",,,";
      }
      if (cell.has_transfer)
        csv << format_double(cell.ref_h) << ',' << format_double(cell.inter_h) << ','
            << format_double(cell.ref_l) << ',' << format_double(cell.inter_l) << "\n";
      else
        csv << ",,,\n";
    } else {
      all_ok = false;
      csv << "failed: " << sanitize_csv(cell.error) << ",,,,,,,,,,\n";
    }
  }
  write_text_file(fs::path(out_dir) / "summary.csv", csv.str());
  std::cout << "summary = " << (fs::path(out_dir) / "summary.csv").string() << "\n";
  if (!all_ok) {
    std::cerr << "error: one or more sweep cells failed; see summary.csv\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale lab for capacity-constrained sequence autoencoders"};
  app.require_subcommand(1);

  // gen-data
  std::string g_config, g_out;
  std::optional<int> g_n;
  std::optional<std::uint64_t> g_seed;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a toy dataset file");
  gen->add_option("--config", g_config, "config with a [data] section");
  gen->add_option("--out", g_out, "output dataset path")->required();
  gen->add_option("--n", g_n, "number of utterances (overrides config)");
  gen->add_option("--seed", g_seed, "data seed (overrides config)");

  // train
  std::string t_config, t_out, t_data;
  std::optional<std::uint64_t> t_seed;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model into a run directory");
  train_cmd->add_option("--config", t_config, "run config")->required();
  train_cmd->add_option("--out", t_out, "run directory")->required();
  train_cmd->add_option("--seed", t_seed, "training seed (overrides config)");
  train_cmd->add_option("--data", t_data, "dataset file (overrides config)");

  // eval-capacity
  std::string ec_model, ec_data, ec_out, ec_method = "quadrature";
  int ec_grid = 512, ec_samples = 1000;
  std::uint64_t ec_seed = 0;
  double ec_tol = 1e-4;
  CLI::App* ec = app.add_subcommand("eval-capacity",
                                    "report rate, mutual information, and marginal KL");
  ec->add_option("--model", ec_model, "checkpoint path")->required();
  ec->add_option("--data", ec_data, "dataset path")->required();
  ec->add_option("--method", ec_method, "quadrature or monte_carlo")
      ->check(CLI::IsMember({"quadrature", "monte_carlo"}));
  ec->add_option("--grid", ec_grid, "quadrature points per axis");
  ec->add_option("--samples", ec_samples, "Monte Carlo draws per example");
  ec->add_option("--seed", ec_seed, "Monte Carlo seed");
  ec->add_option("--tolerance", ec_tol, "error bound for the reliable flag");
  ec->add_option("--out", ec_out, "also write the report here");

  // verify-bounds
  std::string vb_model, vb_data, vb_method = "quadrature";
  int vb_grid = 0, vb_samples = 0, vb_joint = 0;
  std::uint64_t vb_seed = 0;
  double vb_tol = 1e-4;
  CLI::App* vb = app.add_subcommand("verify-bounds",
                                    "check the information bounds on a checkpoint");
  vb->add_option("--model", vb_model, "checkpoint path")->required();
  vb->add_option("--data", vb_data, "dataset path")->required();
  vb->add_option("--method", vb_method, "quadrature or monte_carlo (flat checkpoints)")
      ->check(CLI::IsMember({"quadrature", "monte_carlo"}));
  vb->add_option("--grid", vb_grid, "quadrature points per axis (0 = default)");
  vb->add_option("--samples", vb_samples, "sampling draws per example (0 = default)");
  vb->add_option("--joint-samples", vb_joint, "joint-estimator draws per example (0 = default)");
  vb->add_option("--seed", vb_seed, "sampling seed");
  vb->add_option("--tolerance", vb_tol, "base tolerance for the checks");

  // transfer
  std::string tr_model, tr_data, tr_out, tr_level = "flat";
  int tr_samples = 5, tr_limit = 0, tr_text = -1, tr_speaker = -1;
  std::uint64_t tr_seed = 0;
  CLI::App* tr = app.add_subcommand("transfer", "re-synthesize each reference's style");
  tr->add_option("--model", tr_model, "checkpoint path")->required();
  tr->add_option("--data", tr_data, "reference dataset path")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--level", tr_level, "flat, via_z_h, or via_z_l")
      ->check(CLI::IsMember({"flat", "via_z_h", "via_z_l"}));
  tr->add_option("--samples", tr_samples, "samples per reference");
  tr->add_option("--seed", tr_seed, "sampling seed");
  tr->add_option("--limit", tr_limit, "use only the first N references (0 = all)");
  tr->add_option("--text", tr_text, "override target text class (-1 = reference's)");
  tr->add_option("--speaker", tr_speaker, "override target speaker (-1 = reference's)");

  // sample
  std::string s_model, s_out, s_data;
  int s_text = 0, s_speaker = 0, s_samples = 5, s_max_len = 0;
  std::uint64_t s_seed = 0;
  CLI::App* sam = app.add_subcommand("sample", "decode draws from the prior");
  sam->add_option("--model", s_model, "checkpoint path")->required();
  sam->add_option("--out", s_out, "output directory")->required();
  sam->add_option("--text", s_text, "text class to condition on");
  sam->add_option("--speaker", s_speaker, "speaker to condition on");
  sam->add_option("--samples", s_samples, "number of draws");
  sam->add_option("--seed", s_seed, "sampling seed");
  sam->add_option("--max-len", s_max_len, "free-running length cap");
  sam->add_option("--data", s_data, "dataset whose longest utterance sets the cap");

  // mcd-dtw
  std::string m_a, m_b, m_out;
  double m_penalty = 1.0;
  bool m_conventional = false, m_max_len_denom = false;
  CLI::App* mc = app.add_subcommand("mcd-dtw", "compare WAV files or dataset files pairwise");
  mc->add_option("--a", m_a, "first WAV or dataset file")->required();
  mc->add_option("--b", m_b, "second WAV or dataset file")->required();
  mc->add_option("--out", m_out, "write the CSV here instead of stdout");
  mc->add_option("--warp-penalty", m_penalty, "cost added on non-diagonal steps");
  mc->add_flag("--conventional", m_conventional, "apply the 10*sqrt(2)/ln(10) scale");
  mc->add_flag("--per-frame-max-len", m_max_len_denom,
               "divide by max sequence length instead of path length");

  // sweep
  std::string sw_config, sw_out;
  int sw_jobs = 1, sw_transfer_samples = 5;
  std::optional<std::uint64_t> sw_seed;
  CLI::App* sw = app.add_subcommand("sweep", "expand [sweep] lists into independent runs");
  sw->add_option("--config", sw_config, "run config with a [sweep] section")->required();
  sw->add_option("--out", sw_out, "sweep directory")->required();
  sw->add_option("--jobs", sw_jobs, "worker threads")->check(CLI::PositiveNumber);
  sw->add_option("--seed", sw_seed, "training seed (overrides config)");
  sw->add_option("--transfer-samples", sw_transfer_samples,
                 "samples per reference for hierarchical transfer scores");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  std::function<int()> run;
  if (app.got_subcommand(gen)) {
    run = [&] { return cmd_gen_data(g_config, g_out, g_n, g_seed); };
  } else if (app.got_subcommand(train_cmd)) {
    run = [&] { return cmd_train(t_config, t_out, t_seed, t_data); };
  } else if (app.got_subcommand(ec)) {
    run = [&] {
      return cmd_eval_capacity(ec_model, ec_data, ec_method, ec_grid, ec_samples, ec_seed,
                               ec_tol, ec_out);
    };
  } else if (app.got_subcommand(vb)) {
    run = [&] {
      return cmd_verify_bounds(vb_model, vb_data, vb_method, vb_grid, vb_samples, vb_joint,
                               vb_seed, vb_tol);
    };
  } else if (app.got_subcommand(tr)) {
    run = [&] {
      return cmd_transfer(tr_model, tr_data, tr_out, tr_level, tr_samples, tr_seed, tr_limit,
                          tr_text, tr_speaker);
    };
  } else if (app.got_subcommand(sam)) {
    run = [&] {
      return cmd_sample(s_model, s_out, s_data, s_text, s_speaker, s_samples, s_seed, s_max_len);
    };
  } else if (app.got_subcommand(mc)) {
    run = [&] {
      return cmd_mcd_dtw(m_a, m_b, m_out, m_penalty, m_conventional, m_max_len_denom);
    };
  } else {
    run = [&] { return cmd_sweep(sw_config, sw_out, sw_jobs, sw_seed, sw_transfer_samples); };
  }

  try {
    return run();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
