/*
 * Copyright 2026 The PLHN Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "log.hpp"
#include "metrics.hpp"
#include "sampler.hpp"

namespace plhn {
namespace fs = std::filesystem;

double step_lr(std::int64_t iteration, std::int64_t total, double lr0, double power, double floor) {
  if (total <= 0 || iteration < 0 || iteration > total) throw InvalidInputError("step_lr: iteration out of range");
  const double frac = 1.0 - static_cast<double>(iteration) / static_cast<double>(total);
  return std::max(lr0 * std::pow(frac, power), floor);
}

void sgd_step(const std::vector<nn::Param<float>*>& params, std::map<std::string, Tensor<float>>& velocity,
              double lr, double momentum, double weight_decay) {
  const float l = static_cast<float>(lr), mu = static_cast<float>(momentum), wd = static_cast<float>(weight_decay);
  for (auto* p : params) {
    auto it = velocity.find(p->name);
    if (it == velocity.end()) it = velocity.emplace(p->name, Tensor<float>(p->value.shape())).first;
    float* v = it->second.data();
    float* w = p->value.data();
    const float* g = p->grad.data();
    for (Index i = 0; i < p->value.numel(); ++i) {
      v[i] = mu * v[i] + g[i] + wd * w[i];
      w[i] -= l * v[i];
    }
  }
}

double validation_dsc(HybridNet<float>& net, PrototypeBank* bank, const ActiveParts& parts,
                      const std::vector<VolumeCase>& cases) {
  if (cases.empty()) throw InvalidInputError("validation needs at least one case");
  const NetworkConfig& cfg = net.config();
  net.set_training(false);
  const PatchPredictor predict = [&](const InputTensor& in, std::size_t) {
    const Dims3 d = in.dims();
    Tensor<float> x = in.data;
    x.reshape({1, 2, d.h, d.w, d.z});
    const auto out = net.forward(x, parts, parts.prototypes ? bank : nullptr);
    return Volume(d, out.final_prob().vec());
  };
  double sum = 0.0;
  for (const auto& c : cases) {
    const auto sw = sliding_window_predict(c.pre_contrast, c.post_contrast, cfg.patch_dims, cfg.stride, cfg.Ws, predict);
    sum += *overlap_metrics(threshold_mask(sw.prob), c.tumor_mask).dsc;
  }
  net.set_training(true);
  return sum / static_cast<double>(cases.size());
}

namespace {

std::string fmt(double v) {
  char b[64];
  std::snprintf(b, sizeof b, "%.9g", v);
  return b;
}

constexpr const char* kCsvColumns =
    "stage,epoch,iteration,lr,dice_p1,bce_p1,dice_pf,bce_pf,ppc,ppc_skipped,lambda1,lambda2,total,bank_updates";

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

class Session {
 public:
  Session(const NetworkConfig& cfg, const std::vector<VolumeCase>& cases, const std::vector<VolumeCase>& val,
          const TrainOptions& opt, const EpochCallback& cb)
      : cfg_(cfg), cases_(cases), val_(val.empty() ? cases : val), opt_(opt), cb_(cb) {
    fs::create_directories(opt.out_dir);
    report_.last_ckpt = (fs::path(opt.out_dir) / "last.ckpt").string();
    report_.best_ckpt = (fs::path(opt.out_dir) / "best.ckpt").string();
    report_.stage1_ckpt = (fs::path(opt.out_dir) / "stage1.ckpt").string();
    report_.log_csv = (fs::path(opt.out_dir) / "train_log.csv").string();
    report_.config_snapshot = (fs::path(opt.out_dir) / "config.json").string();
  }

  TrainReport run() {
    require_valid(cfg_);
    if (cases_.empty()) throw InvalidInputError("training needs at least one case");
    if (!cfg_.flags.two_stage && opt_.only_stage != 0)
      throw ConfigError("--stage requires the two-stage schedule (flags.two_stage = true)");
    if (opt_.only_stage < 0 || opt_.only_stage > 2) throw ConfigError("stage must be 1 or 2");

    std::string resume = opt_.resume;
    if (resume.empty() && opt_.only_stage == 2) {
      if (!fs::exists(report_.stage1_ckpt))
        throw ConfigError("stage 2 requested but no stage-1 checkpoint was given (--resume) or found at " +
                          report_.stage1_ckpt);
      resume = report_.stage1_ckpt;
    }
    if (!resume.empty()) {
      LoadedCheckpoint ck = load_checkpoint(resume);
      if (ck.config_hash != config_hash(cfg_))
        throw ConfigError("checkpoint " + resume + " was trained with a different config (hash " + ck.config_hash + ")");
      net_ = std::move(ck.net);
      st_ = std::move(ck.state);
      std::istringstream is(st_.rng);
      is >> rng_;
      if (!is) throw IoError(resume + ": corrupt rng state");
      if (opt_.only_stage == 2 && st_.stage == 1 && !st_.stage_complete)
        throw ConfigError("stage 2 requested but " + resume + " holds an unfinished stage 1");
    } else {
      net_ = std::make_unique<HybridNet<float>>(cfg_);
      net_->init(static_cast<std::uint64_t>(cfg_.seed));
      rng_.seed(static_cast<std::uint64_t>(cfg_.seed) ^ 0x9e3779b97f4a7c15ull);
      st_ = TrainState{};
      st_.stage = cfg_.flags.two_stage ? 1 : 0;
    }
    net_->set_training(true);
    save_config(cfg_, report_.config_snapshot);
    open_log();

    if (st_.stage == 0) {
      run_stage(0, cfg_.stage1_epochs + cfg_.stage2_epochs, cfg_.stage1_lr);
    } else {
      if (st_.stage == 1 && opt_.only_stage != 2) run_stage(1, cfg_.stage1_epochs, cfg_.stage1_lr);
      if (opt_.only_stage != 1) {
        if (st_.stage == 1) begin_stage2();
        run_stage(2, cfg_.stage2_epochs, cfg_.stage2_lr);
      }
    }
    report_.state = st_;
    return std::move(report_);
  }

 private:
  void open_log() {
    // keep rows up to the resumed iteration so a resumed log matches an uninterrupted one
    std::vector<std::string> keep;
    if (!opt_.resume.empty() || opt_.only_stage == 2) {
      std::ifstream in(report_.log_csv);
      std::string line;
      const int order = stage_order(st_.stage);
      while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#' || line.rfind("stage,", 0) == 0) continue;
        const int s = std::stoi(line.substr(0, line.find(',')));
        std::istringstream ls(line);
        std::string field;
        std::int64_t it = 0;
        for (int f = 0; f < 3 && std::getline(ls, field, ','); ++f)
          if (f == 2) it = std::stoll(field);
        if (stage_order(s) < order || (s == st_.stage && it < st_.iteration)) keep.push_back(line);
      }
    }
    log_.open(report_.log_csv, std::ios::trunc);
    if (!log_) throw IoError("cannot write " + report_.log_csv);
    log_ << "# config_hash: " << config_hash(cfg_) << "\n"
         << "# optimizer: sgd momentum=" << fmt(cfg_.sgd_momentum) << " weight_decay=" << fmt(cfg_.weight_decay)
         << "\n"
         << "# schedule: poly power=" << fmt(cfg_.lr_power) << " floor=" << fmt(cfg_.lr_floor)
         << (cfg_.flags.two_stage ? " two_stage" : " joint") << " stage1_lr=" << fmt(cfg_.stage1_lr)
         << " stage2_lr=" << fmt(cfg_.stage2_lr) << "\n"
         << kCsvColumns << "\n";
    for (const auto& l : keep) log_ << l << "\n";
    log_.flush();
  }

  static int stage_order(int s) { return s == 0 ? 0 : s; }

  void begin_stage2() {
    st_.stage = 2;
    st_.epoch = 0;
    st_.iteration = 0;
    st_.stage_complete = false;
    st_.momentum.clear();  // fresh optimizer state for the new stage
  }

  void run_stage(int stage, int epochs, double lr0) {
    const ActiveParts act = active_parts(cfg_, stage);
    const Index B = cfg_.batch_cases;
    const Index n = static_cast<Index>(cases_.size());
    const std::int64_t per_epoch = (n + B - 1) / B;
    const std::int64_t total = std::max<std::int64_t>(1, per_epoch * epochs);
    while (st_.epoch < epochs) {
      std::vector<Index> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), Index{0});
      std::shuffle(perm.begin(), perm.end(), rng_);
      EpochSummary es;
      es.stage = stage;
      es.epoch = st_.epoch + 1;
      for (Index b = 0; b < n; b += B) {
        std::vector<const VolumeCase*> group;
        for (Index i = b; i < std::min(n, b + B); ++i) group.push_back(&cases_[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
        const double lr = step_lr(st_.iteration, total, lr0, cfg_.lr_power, cfg_.lr_floor);
        const LossBreakdown l = step(group, act, lr, stage);
        es.mean_total += l.total;
        es.mean_seg_loss += l.dice_p1 + l.bce_p1;
        ++st_.iteration;
      }
      es.mean_total /= static_cast<double>(per_epoch);
      es.mean_seg_loss /= static_cast<double>(per_epoch);
      ++st_.epoch;
      const bool last = st_.epoch == epochs;
      st_.stage_complete = last;
      if (opt_.validate && (last || (cfg_.val_every > 0 && st_.epoch % cfg_.val_every == 0))) {
        es.val_dsc = validation_dsc(*net_, act.prototypes ? &st_.bank : nullptr, act, val_);
        if (*es.val_dsc > st_.best_dsc) {
          st_.best_dsc = *es.val_dsc;
          st_.best_epoch = st_.epoch;
          checkpoint(report_.best_ckpt);
        }
      }
      checkpoint(report_.last_ckpt);
      if (last && stage == 1) checkpoint(report_.stage1_ckpt);
      log::info("stage " + std::to_string(stage) + " epoch " + std::to_string(es.epoch) + "/" + std::to_string(epochs) +
                " loss " + fmt(es.mean_total) + (es.val_dsc ? " val_dsc " + fmt(*es.val_dsc) : ""));
      report_.epochs.push_back(es);
      if (cb_) cb_(es);
    }
    if (epochs == 0) st_.stage_complete = true;
  }

  LossBreakdown step(const std::vector<const VolumeCase*>& group, const ActiveParts& act, double lr, int stage) {
    const std::vector<PatchRecord> batch = build_batch(group, cfg_, rng_);
    std::vector<const InputTensor*> inputs;
    std::vector<std::uint8_t> y;
    for (const auto& r : batch) {
      inputs.push_back(&r.input);
      y.insert(y.end(), r.label.data().begin(), r.label.data().end());
    }
    const Tensor<float> x = stack_inputs<float>(inputs);

    const auto hook = [&](const Tensor<float>& X) {
      if (st_.bank.initialized) return;
      const auto per_class = features_by_class(X, y, cfg_.C, kPrototypeInitCap, rng_);
      st_.bank = init_prototypes(per_class, cfg_.K, cfg_.eta, cfg_.kmeans_iters, rng_);
    };
    const auto out = net_->forward(x, act, act.prototypes ? &st_.bank : nullptr, hook);

    Assignment a;
    std::optional<double> ppc;
    Tensor<float> dS, dp1, dpf;
    if (act.prototypes) {
      a = assign_prototypes(out.s, y, cfg_.C, cfg_.K, cfg_.assign_scope);
      std::vector<bool> present(static_cast<std::size_t>(cfg_.C), false);
      for (auto v : y) present[v] = true;
      if (std::all_of(present.begin(), present.end(), [](bool p) { return p; }))
        ppc = ppc_loss(out.s, a, cfg_.tau, &dS, cfg_.lambda2);
      else
        log::info("iteration " + std::to_string(st_.iteration) + ": a class is absent from the batch, skipping ppc");
    }
    const bool has_pf = !out.pf.empty();
    LossBreakdown l = total_loss(out.p1, has_pf ? &out.pf : nullptr, y, ppc, has_pf ? cfg_.lambda1 : 0.0,
                                 act.prototypes ? cfg_.lambda2 : 0.0, &dp1, has_pf ? &dpf : nullptr);
    if (!std::isfinite(l.total))
      throw NumericError("non-finite loss at stage " + std::to_string(stage) + " iteration " + std::to_string(st_.iteration));

    net_->zero_grad();
    net_->backward(dp1, dpf, dS);
    sgd_step(net_->params(act), st_.momentum, lr, cfg_.sgd_momentum, cfg_.weight_decay);

    if (act.prototypes) {
      const ClusterMeans means = compute_cluster_means(out.x, a, st_.bank.slots());
      momentum_update(st_.bank, means);
      const auto reseeded = reinit_dead_slots(st_.bank, out.x, out.s, a, cfg_.empty_slot_reinit);
      for (int s : reseeded) log::info("re-seeded dead prototype slot " + std::to_string(s));
    }

    log_ << stage << ',' << st_.epoch + 1 << ',' << st_.iteration << ',' << fmt(lr) << ',' << fmt(l.dice_p1) << ','
         << fmt(l.bce_p1) << ',' << fmt(l.dice_pf) << ',' << fmt(l.bce_pf) << ',' << fmt(l.ppc) << ','
         << (l.ppc_skipped && act.prototypes ? 1 : 0) << ',' << fmt(l.lambda1) << ',' << fmt(l.lambda2) << ','
         << fmt(l.total) << ',' << st_.bank.update_count << '\n';
    log_.flush();
    return l;
  }

  void checkpoint(const std::string& path) {
    st_.rng = rng_text(rng_);
    save_checkpoint(path, *net_, st_);
  }

  const NetworkConfig& cfg_;
  const std::vector<VolumeCase>& cases_;
  const std::vector<VolumeCase>& val_;
  const TrainOptions& opt_;
  const EpochCallback& cb_;
  std::unique_ptr<HybridNet<float>> net_;
  TrainState st_;
  std::mt19937_64 rng_;
  std::ofstream log_;
  TrainReport report_;
};

}  // namespace

TrainReport train(const NetworkConfig& cfg, const std::vector<VolumeCase>& cases, const std::vector<VolumeCase>& val,
                  const TrainOptions& opt, const EpochCallback& on_epoch) {
  Session s(cfg, cases, val, opt, on_epoch);
  return s.run();
}

}  // namespace plhn
