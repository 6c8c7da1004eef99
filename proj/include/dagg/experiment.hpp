#pragma once

#include <atomic>
#include <chrono>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "dagg/checkpoint.hpp"
#include "dagg/config.hpp"
#include "dagg/data.hpp"
#include "dagg/models.hpp"
#include "dagg/training.hpp"

namespace dagg {

namespace fs = std::filesystem;

struct DataSplits {
  Dataset train;
  Dataset val;
};

// Number formatting shared by every log so the same value prints identically
// in JSONL and CSV outputs.
inline std::string fmt(double x) { return Json(x).dump(); }

namespace detail {

inline void flatten_inputs(Dataset& d) {
  if (d.inputs.rank() > 2) d.inputs = ops::reshape(d.inputs, {d.size(), d.sample_numel()});
}

inline DataSplits split_by_fraction(const Dataset& all, double val_fraction) {
  const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(all.size() * val_fraction)));
  if (n_val >= all.size()) fail(ErrorCode::EmptyDataset, "dataset too small to hold out a validation split");
  return {all.slice(0, all.size() - n_val, "train"), all.slice(all.size() - n_val, all.size(), "val")};
}

}  // namespace detail

inline DataSplits load_datasets(const RunConfig& cfg) {
  const auto& d = cfg.dataset;
  DataSplits out;
  if (d.kind == "synthetic") {
    const auto kind = d.generator == "two_spirals" ? SyntheticKind::TwoSpirals : SyntheticKind::GaussianBlobs;
    out = detail::split_by_fraction(gen_synthetic(kind, d.n, d.noise, d.seed, d.classes), d.val_fraction);
  } else if (d.kind == "idx") {
    auto train = load_idx(d.images, d.labels, d.classes);
    if (d.val_images.empty()) {
      out = detail::split_by_fraction(train, d.val_fraction);
    } else {
      out = {std::move(train), load_idx(d.val_images, d.val_labels, d.classes)};
    }
  } else {
    auto train = load_csv(d.path, d.input_dim, d.classes, d.header);
    if (d.val_path.empty()) {
      out = detail::split_by_fraction(train, d.val_fraction);
    } else {
      out = {std::move(train), load_csv(d.val_path, d.input_dim, d.classes, d.header)};
    }
  }
  out.train.split = "train";
  out.val.split = "val";
  const bool flat = cfg.student.kind == "mlp" || cfg.teacher.model.kind == "mlp";
  if (flat && (cfg.student.kind != "mlp" || cfg.teacher.model.kind != "mlp")) {
    fail(ErrorCode::ValidationError, "teacher and student must both be convnets or both be mlps");
  }
  if (flat) {
    detail::flatten_inputs(out.train);
    detail::flatten_inputs(out.val);
  }
  return out;
}

inline TappedNetwork build_model(const ModelSpec& spec, const Dataset& data, std::uint64_t seed, Stream stream) {
  const Shape s = data.sample_shape();
  if (spec.kind == "mlp") return build_mlp(spec.hidden, shape_numel(s), data.classes, seed, stream);
  if (s.size() != 3) {
    fail(ErrorCode::BadShape, "convnet needs [C,H,W] samples, dataset provides " + shape_str(s));
  }
  return build_convnet(spec.width, {s[0], s[1], s[2]}, data.classes, seed, stream);
}

// Visits the samples of one epoch in a seeded order, batch by batch.
inline void for_each_batch(std::size_t n, std::size_t batch_size, Rng& rng,
                           const std::function<void(std::span<const std::size_t>)>& fn) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t end = std::min(n, begin + batch_size);
    fn(std::span<const std::size_t>(order.data() + begin, end - begin));
  }
}

struct TeacherResult {
  TappedNetwork net;
  EvalMetrics val;
  fs::path checkpoint;
};

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
}

// Trains the teacher on the main loss only, saves it under <out_dir>, and
// records its validation metrics next to the checkpoint.
inline TeacherResult pretrain_teacher(const RunConfig& cfg, const DataSplits& data, const fs::path& out_dir) {
  const auto& spec = cfg.teacher;
  auto net = build_model(spec.model, data.train, spec.seed, Stream::TeacherInit);
  const EvalMetrics untrained = evaluate(net, data.val);
  {
    Trainer trainer(net, {}, {}, spec.pretrain.optimizer);
    Rng rng = Rng::derive(spec.seed, Stream::TeacherShuffle);
    std::size_t iteration = 0;
    const FeatureBundle none;
    for (std::size_t epoch = 0; epoch < spec.pretrain.epochs; ++epoch) {
      for_each_batch(data.train.size(), spec.pretrain.batch_size, rng, [&](std::span<const std::size_t> idx) {
        auto [x, y] = data.train.gather(idx);
        trainer.step(x, y, none, epoch, iteration++);
      });
    }
  }
  net.freeze();
  const auto path = out_dir / "teacher.ckpt";
  fs::create_directories(out_dir);
  save_checkpoint(path, net.export_parameters());
  const EvalMetrics val = evaluate(net, data.val);
  Json record{{"top1_err", val.top1_err},
              {"main_loss", val.main_loss},
              {"untrained_top1_err", untrained.top1_err},
              {"epochs", spec.pretrain.epochs},
              {"parameters", net.parameter_count()}};
  write_text(out_dir / "teacher_metrics.json", record.dump() + "\n");
  return {std::move(net), val, path};
}

inline TeacherResult load_teacher(const RunConfig& cfg, const DataSplits& data, const fs::path& checkpoint) {
  auto net = build_model(cfg.teacher.model, data.train, cfg.teacher.seed, Stream::TeacherInit);
  net.load_parameters(load_checkpoint(checkpoint));
  net.freeze();
  EvalMetrics val = evaluate(net, data.val);
  return {std::move(net), val, checkpoint};
}

// Everything one grid shares read-only across runs.
struct SharedContext {
  const RunConfig* config = nullptr;
  DataSplits data;
  TeacherResult teacher;
  FeatureCache train_cache;  // teacher taps used by any path, plus logits
  FeatureCache val_cache;    // teacher logits only
};

inline SharedContext prepare(const RunConfig& cfg) {
  DataSplits data = load_datasets(cfg);
  TeacherResult teacher = cfg.teacher.checkpoint ? load_teacher(cfg, data, *cfg.teacher.checkpoint)
                                                 : pretrain_teacher(cfg, data, fs::path(cfg.output_dir) / "teacher");
  std::set<std::string> taps;
  for (const auto& p : cfg.paths) taps.insert(p.teacher_taps.begin(), p.teacher_taps.end());
  taps.erase("logits");
  auto train_cache = FeatureCache::build(teacher.net, data.train, {taps.begin(), taps.end()});
  auto val_cache = FeatureCache::build(teacher.net, data.val, {});
  return {&cfg, std::move(data), std::move(teacher), std::move(train_cache), std::move(val_cache)};
}

struct RunSummary {
  std::string strategy;
  std::uint64_t seed = 0;
  std::string run_id;
  std::size_t best_epoch = 0;
  double top1_err = 0.0;
  double top1_agr = 0.0;
  double wall_time_per_iter = 0.0;
};

inline std::string run_id(const RunConfig& cfg, const std::string& strategy, std::uint64_t seed) {
  return strategy + (cfg.aggregation.layerwise && !is_harness_strategy(strategy) ? "-layerwise" : "") + "-seed" +
         std::to_string(seed);
}

// Student distillation paths for one run, with adapters wherever an NST pair
// changes channel count. Adapter draws come from their own stream.
inline std::vector<DistillPath> instantiate_paths(const RunConfig& cfg, const std::string& strategy,
                                                  const TappedNetwork& student, const TappedNetwork& teacher,
                                                  std::uint64_t seed) {
  if (strategy == kStudentStrategy) return {};
  auto paths = strategy == kSingleStrategy ? std::vector<DistillPath>{cfg.paths.front()} : cfg.effective_paths();
  const auto s_shapes = student.tap_shapes(), t_shapes = teacher.tap_shapes();
  for (std::size_t i = 0; i < paths.size(); ++i) {
    auto& p = paths[i];
    p.adapters.assign(p.student_taps.size(), std::nullopt);
    if (p.kind != PathKind::NST) continue;
    for (std::size_t j = 0; j < p.student_taps.size(); ++j) {
      auto s = s_shapes.find(p.student_taps[j]);
      auto t = t_shapes.find(p.teacher_taps[j]);
      if (s == s_shapes.end()) fail(ErrorCode::UnknownTap, "path '" + p.id + "': student has no tap '" + p.student_taps[j] + "'");
      if (t == t_shapes.end()) fail(ErrorCode::UnknownTap, "path '" + p.id + "': teacher has no tap '" + p.teacher_taps[j] + "'");
      if (s->second.size() != 3 || t->second.size() != 3) {
        fail(ErrorCode::ShapeMismatch, "path '" + p.id + "': NST needs [D,H,W] feature maps");
      }
      if (s->second[0] != t->second[0]) {
        Rng rng = Rng::derive(seed, Stream::AdapterInit, i * 64 + j);
        p.adapters[j] = AdaptationLayer::create(s->second[0], t->second[0], rng);
      }
    }
  }
  return paths;
}

// Trains one (strategy, seed) run and writes its logs under <output_dir>/<run_id>/.
// `after_epoch` runs once each epoch's logs are flushed.
inline RunSummary run_single(const SharedContext& ctx, const std::string& strategy, std::uint64_t seed,
                             const std::function<void(std::size_t)>& after_epoch = {}) {
  const RunConfig& cfg = *ctx.config;
  const std::string id = run_id(cfg, strategy, seed);
  const fs::path dir = fs::path(cfg.output_dir) / id;
  fs::create_directories(dir);

  auto student = build_model(cfg.student, ctx.data.train, seed, Stream::StudentInit);
  auto paths = instantiate_paths(cfg, strategy, student, ctx.teacher.net, seed);
  AggregationConfig agg = cfg.aggregation;
  agg.strategy = is_harness_strategy(strategy) ? Strategy::Equal : *parse_strategy(strategy);
  Trainer trainer(student, paths, agg, cfg.optimizer);

  // Surface tap and shape errors before any log is written.
  {
    NoGradGuard guard;
    const std::vector<std::size_t> probe{0};
    auto sb = student.forward(ctx.data.train.gather(probe).first);
    auto tb = ctx.train_cache.gather(probe);
    for (const auto& p : trainer.paths()) path_loss(p, sb, tb);
  }

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  std::ofstream weights(dir / "weights.csv", std::ios::trunc);
  std::ofstream similarity(dir / "similarity.csv", std::ios::trunc);
  std::ofstream timing(dir / "timing.csv", std::ios::trunc);
  if (!metrics || !weights || !similarity || !timing) fail(ErrorCode::IoError, "cannot open logs in " + dir.string());
  weights << "iter,path_id,v,z\n";
  similarity << "iter,path_a,path_b,cosine\n";
  timing << "epoch,iterations,wall_time_per_iter\n";

  const std::size_t k = trainer.paths().size();
  Rng shuffle = Rng::derive(seed, Stream::Shuffle);
  std::size_t iteration = 0;
  RunSummary summary{strategy, seed, id};
  double best = std::numeric_limits<double>::infinity();
  double total_time = 0.0;
  std::size_t total_iters = 0;
  std::vector<double> last_v = trainer.aggregation().v();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double main_sum = 0.0;
    std::vector<double> path_sum(k, 0.0);
    std::size_t samples = 0, iters = 0;
    double epoch_time = 0.0;
    std::string weight_rows;
    for_each_batch(ctx.data.train.size(), cfg.batch_size, shuffle, [&](std::span<const std::size_t> idx) {
      auto [x, y] = ctx.data.train.gather(idx);
      auto tb = ctx.train_cache.gather(idx);
      const bool sim = cfg.sim_every > 0 && iteration % cfg.sim_every == 0;
      const auto start = std::chrono::steady_clock::now();
      auto r = trainer.step(x, y, tb, epoch, iteration, sim);
      epoch_time += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      main_sum += r.main_loss * static_cast<double>(idx.size());
      for (std::size_t i = 0; i < k; ++i) {
        path_sum[i] += r.per_path[i] * static_cast<double>(idx.size());
        weight_rows += std::to_string(iteration) + "," + trainer.paths()[i].id + "," + fmt(r.v[i]) + "," +
                       (r.z.empty() ? std::string() : fmt(r.z[i])) + "\n";
      }
      if (r.similarity) {
        for (std::size_t a = 0; a < k; ++a) {
          for (std::size_t b = a + 1; b < k; ++b) {
            similarity << iteration << ',' << trainer.paths()[a].id << ',' << trainer.paths()[b].id << ','
                       << fmt((*r.similarity)[a][b]) << '\n';
          }
        }
      }
      last_v = r.v;
      samples += idx.size();
      ++iters;
      ++iteration;
    });
    weights << weight_rows;
    weights.flush();
    similarity.flush();

    const EvalMetrics m = evaluate(student, ctx.data.val, &ctx.val_cache.logits);
    std::vector<double> per_path(k);
    for (std::size_t i = 0; i < k; ++i) per_path[i] = path_sum[i] / static_cast<double>(samples);
    Json line{{"epoch", epoch},
              {"top1_err", m.top1_err},
              {"top1_agreement_err", *m.top1_agreement_err},
              {"main_loss", main_sum / static_cast<double>(samples)},
              {"per_path_losses", per_path},
              {"v", last_v}};
    metrics << line.dump() << '\n';
    metrics.flush();
    timing << epoch << ',' << iters << ',' << fmt(epoch_time / static_cast<double>(iters)) << '\n';
    timing.flush();
    total_time += epoch_time;
    total_iters += iters;
    if (m.top1_err < best) {
      best = m.top1_err;
      summary.best_epoch = epoch;
      summary.top1_err = m.top1_err;
      summary.top1_agr = *m.top1_agreement_err;
    }
    if (after_epoch) after_epoch(epoch);
  }
  Json final_line{{"final", true},
                  {"strategy", strategy},
                  {"seed", seed},
                  {"best_epoch", summary.best_epoch},
                  {"top1_err", summary.top1_err},
                  {"top1_agreement_err", summary.top1_agr}};
  metrics << final_line.dump() << '\n';
  summary.wall_time_per_iter = total_time / static_cast<double>(std::max<std::size_t>(total_iters, 1));
  return summary;
}

inline std::string results_csv(const std::vector<RunSummary>& runs) {
  std::string out = "strategy,seed,top1_err,top1_agr\n";
  for (const auto& r : runs) {
    out += r.strategy + "," + std::to_string(r.seed) + "," + fmt(r.top1_err) + "," + fmt(r.top1_agr) + "\n";
  }
  return out;
}

// Runs every (strategy, seed) pair, up to `jobs` at a time, then writes
// <output_dir>/results.csv in grid order.
inline std::vector<RunSummary> run_grid(const SharedContext& ctx, std::size_t jobs = 1) {
  const RunConfig& cfg = *ctx.config;
  std::vector<std::pair<std::string, std::uint64_t>> grid;
  for (const auto& s : cfg.strategies) {
    for (auto seed : cfg.seeds) grid.emplace_back(s, seed);
  }
  std::vector<RunSummary> results(grid.size());
  std::vector<std::exception_ptr> errors(grid.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      try {
        results[i] = run_single(ctx, grid[i].first, grid[i].second);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, grid.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::vector<RunSummary> done;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!errors[i]) done.push_back(results[i]);
  }
  write_text(fs::path(cfg.output_dir) / "results.csv", results_csv(done));
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

}  // namespace dagg
