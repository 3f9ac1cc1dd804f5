#include "headlab/harness.hpp"

#include "headlab/checkpoint.hpp"
#include "headlab/io_util.hpp"
#include "headlab/random.hpp"
#include "headlab/version.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

namespace headlab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void check_keys(const json& j, const std::vector<std::string>& allowed,
                const std::string& where) {
  if (!j.is_object())
    throw std::runtime_error("config: " + where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw std::runtime_error("config: unknown key \"" + key + "\" in " +
                               where);
  }
}

SynthConfig synth_from_config_json(const json& j, const std::string& where) {
  check_keys(j,
             {"num_classes", "min_objects", "max_objects", "min_size",
              "max_size", "aspect_low", "aspect_high", "boundary_softness",
              "noise_sigma", "channels", "stride", "image_size", "scenes",
              "index_offset", "seed"},
             where);
  SynthConfig c;
  c.num_classes = j.value("num_classes", c.num_classes);
  c.min_objects = j.value("min_objects", c.min_objects);
  c.max_objects = j.value("max_objects", c.max_objects);
  c.min_size = j.value("min_size", c.min_size);
  c.max_size = j.value("max_size", c.max_size);
  c.aspect_low = j.value("aspect_low", c.aspect_low);
  c.aspect_high = j.value("aspect_high", c.aspect_high);
  c.boundary_softness = j.value("boundary_softness", c.boundary_softness);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.channels = j.value("channels", c.channels);
  c.stride = j.value("stride", c.stride);
  c.image_size = j.value("image_size", c.image_size);
  c.scenes = j.value("scenes", c.scenes);
  c.index_offset = j.value("index_offset", c.index_offset);
  c.seed = j.value("seed", c.seed);
  return c;
}

json synth_to_config_json(const SynthConfig& c) {
  return json{{"num_classes", c.num_classes},
              {"min_objects", c.min_objects},
              {"max_objects", c.max_objects},
              {"min_size", c.min_size},
              {"max_size", c.max_size},
              {"aspect_low", c.aspect_low},
              {"aspect_high", c.aspect_high},
              {"boundary_softness", c.boundary_softness},
              {"noise_sigma", c.noise_sigma},
              {"channels", c.channels},
              {"stride", c.stride},
              {"image_size", c.image_size},
              {"scenes", c.scenes},
              {"index_offset", c.index_offset},
              {"seed", c.seed}};
}

DataRole data_role_from_json(const json& j, const std::string& where) {
  check_keys(j, {"synth", "path"}, where);
  DataRole role;
  if (j.contains("synth")) role.synth = synth_from_config_json(j["synth"], where + ".synth");
  if (j.contains("path")) role.path = j["path"].get<std::string>();
  if (role.synth.has_value() == role.path.has_value())
    throw std::runtime_error("config: " + where +
                             " needs exactly one of synth or path");
  return role;
}

json data_role_to_json(const DataRole& role) {
  json j = json::object();
  if (role.synth) j["synth"] = synth_to_config_json(*role.synth);
  if (role.path) j["path"] = *role.path;
  return j;
}

ApInterpolation interp_from_name(const std::string& name) {
  if (name == "all_points") return ApInterpolation::kAllPoints;
  if (name == "eleven_point") return ApInterpolation::kElevenPoint;
  throw std::runtime_error("config: unknown interpolation \"" + name + "\"");
}

const char* interp_name(ApInterpolation i) {
  return i == ApInterpolation::kAllPoints ? "all_points" : "eleven_point";
}

std::string param_payload_checksum(const ParameterStore& store) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : store.all()) {
    h = fnv1a64(std::as_bytes(std::span(p->name.data(), p->name.size())), h);
    h = fnv1a64(std::as_bytes(std::span(p->value.data(),
                                        static_cast<size_t>(p->value.size()))),
                h);
  }
  return hex64(h);
}

json checkpoint_meta(const ExperimentConfig& config, int num_classes,
                     int channels) {
  return json{{"code_version", kVersion},
              {"architecture", architecture_name(config.head.architecture)},
              {"num_classes", num_classes},
              {"feature_channels", channels},
              {"config", json::parse(experiment_config_to_json(config))}};
}

std::vector<double> softmax_row(const Tensor& logits, Eigen::Index r) {
  const Eigen::Index k = logits.dim(1);
  double m = logits.at(r, 0);
  for (Eigen::Index c = 1; c < k; ++c) m = std::max(m, logits.at(r, c));
  std::vector<double> p(static_cast<size_t>(k));
  double z = 0.0;
  for (Eigen::Index c = 0; c < k; ++c) {
    p[c] = std::exp(logits.at(r, c) - m);
    z += p[c];
  }
  for (double& v : p) v /= z;
  return p;
}

TrainingBatch to_training_batch(const ProposalBatch& mb,
                                const std::vector<GroundTruth>& gts) {
  TrainingBatch tb;
  tb.proposals = mb.proposals;
  tb.scene_gts = gts;
  tb.labels.resize(mb.proposals.size(), 0);
  tb.matched_gt.resize(mb.proposals.size());
  for (size_t i = 0; i < mb.proposals.size(); ++i) {
    if (mb.is_foreground[i]) {
      const GroundTruth& gt = gts[static_cast<size_t>(mb.matched_gt[i])];
      tb.labels[i] = gt.category;
      tb.matched_gt[i] = gt.box;
    }
  }
  return tb;
}

}  // namespace

ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.train_data.synth = SynthConfig{};  // 200 scenes at offset 0
  SynthConfig test;
  test.scenes = 50;
  test.index_offset = 200;
  c.test_data.synth = test;
  return c;
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("config is not valid JSON: ") +
                             e.what());
  }
  check_keys(j,
             {"seed", "architecture", "branch", "loss", "head", "optimizer",
              "proposal", "eval", "data", "augment_flip",
              "through_box_gradients"},
             "top level");
  ExperimentConfig c = default_experiment_config();
  c.seed = j.value("seed", c.seed);
  if (j.contains("architecture"))
    c.head.architecture = architecture_from_name(j["architecture"]);
  c.head.through_box_gradients =
      j.value("through_box_gradients", c.head.through_box_gradients);
  c.augment_flip = j.value("augment_flip", c.augment_flip);

  if (j.contains("branch")) {
    const json& b = j["branch"];
    check_keys(b, {"num_conv", "num_fc", "conv_width", "fc_width"}, "branch");
    c.head.branch.num_conv = b.value("num_conv", c.head.branch.num_conv);
    c.head.branch.num_fc = b.value("num_fc", c.head.branch.num_fc);
    c.head.branch.conv_width = b.value("conv_width", c.head.branch.conv_width);
    c.head.branch.fc_width = b.value("fc_width", c.head.branch.fc_width);
  }
  if (j.contains("loss")) {
    const json& l = j["loss"];
    check_keys(l, {"alpha", "beta"}, "loss");
    c.head.loss.alpha = l.value("alpha", c.head.loss.alpha);
    c.head.loss.beta = l.value("beta", c.head.loss.beta);
  }
  if (j.contains("head")) {
    const json& h = j["head"];
    check_keys(h,
               {"pool_resolution", "pool_samples", "delta_scale",
                "per_class_regression", "cascade_stages",
                "cascade_fg_thresholds"},
               "head");
    c.head.pool.resolution = h.value("pool_resolution", c.head.pool.resolution);
    c.head.pool.samples = h.value("pool_samples", c.head.pool.samples);
    if (h.contains("delta_scale")) {
      const auto v = h["delta_scale"].get<std::vector<double>>();
      if (v.size() != 4)
        throw std::runtime_error("config: delta_scale needs four entries");
      c.head.delta_scale = DeltaScale{v[0], v[1], v[2], v[3]};
    }
    c.head.per_class_regression =
        h.value("per_class_regression", c.head.per_class_regression);
    c.head.cascade_stages = h.value("cascade_stages", c.head.cascade_stages);
    if (h.contains("cascade_fg_thresholds"))
      c.head.cascade_fg_thresholds =
          h["cascade_fg_thresholds"].get<std::vector<double>>();
  }
  if (j.contains("optimizer")) {
    const json& o = j["optimizer"];
    check_keys(o, {"learning_rate", "momentum", "epochs"}, "optimizer");
    c.optimizer.learning_rate =
        o.value("learning_rate", c.optimizer.learning_rate);
    c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
    c.optimizer.epochs = o.value("epochs", c.optimizer.epochs);
  }
  if (j.contains("proposal")) {
    const json& p = j["proposal"];
    check_keys(p,
               {"center_noise", "scale_noise", "proposals_per_gt",
                "background_count", "minibatch_size", "bg_fg_ratio",
                "match_threshold"},
               "proposal");
    c.proposal.jitter.center_noise =
        p.value("center_noise", c.proposal.jitter.center_noise);
    c.proposal.jitter.scale_noise =
        p.value("scale_noise", c.proposal.jitter.scale_noise);
    c.proposal.jitter.proposals_per_gt =
        p.value("proposals_per_gt", c.proposal.jitter.proposals_per_gt);
    c.proposal.jitter.background_count =
        p.value("background_count", c.proposal.jitter.background_count);
    c.proposal.minibatch_size =
        p.value("minibatch_size", c.proposal.minibatch_size);
    c.proposal.bg_fg_ratio = p.value("bg_fg_ratio", c.proposal.bg_fg_ratio);
    c.proposal.match_threshold =
        p.value("match_threshold", c.proposal.match_threshold);
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    check_keys(e,
               {"score_threshold", "nms_iou", "ap_iou", "max_detections",
                "clip_boxes", "interpolation", "proposal_seed"},
               "eval");
    c.eval.score_threshold = e.value("score_threshold", c.eval.score_threshold);
    c.eval.nms_iou = e.value("nms_iou", c.eval.nms_iou);
    c.eval.ap_iou = e.value("ap_iou", c.eval.ap_iou);
    c.eval.max_detections = e.value("max_detections", c.eval.max_detections);
    c.eval.clip_boxes = e.value("clip_boxes", c.eval.clip_boxes);
    if (e.contains("interpolation"))
      c.eval.interpolation = interp_from_name(e["interpolation"]);
    c.eval.proposal_seed = e.value("proposal_seed", c.eval.proposal_seed);
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    check_keys(d, {"train", "test"}, "data");
    if (d.contains("train"))
      c.train_data = data_role_from_json(d["train"], "data.train");
    if (d.contains("test"))
      c.test_data = data_role_from_json(d["test"], "data.test");
  }
  return c;
}

std::string experiment_config_to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["architecture"] = architecture_name(c.head.architecture);
  j["through_box_gradients"] = c.head.through_box_gradients;
  j["augment_flip"] = c.augment_flip;
  j["branch"] = {{"num_conv", c.head.branch.num_conv},
                 {"num_fc", c.head.branch.num_fc},
                 {"conv_width", c.head.branch.conv_width},
                 {"fc_width", c.head.branch.fc_width}};
  j["loss"] = {{"alpha", c.head.loss.alpha}, {"beta", c.head.loss.beta}};
  j["head"] = {{"pool_resolution", c.head.pool.resolution},
               {"pool_samples", c.head.pool.samples},
               {"delta_scale",
                {c.head.delta_scale.lx, c.head.delta_scale.ly,
                 c.head.delta_scale.lw, c.head.delta_scale.lh}},
               {"per_class_regression", c.head.per_class_regression},
               {"cascade_stages", c.head.cascade_stages},
               {"cascade_fg_thresholds", c.head.cascade_fg_thresholds}};
  j["optimizer"] = {{"learning_rate", c.optimizer.learning_rate},
                    {"momentum", c.optimizer.momentum},
                    {"epochs", c.optimizer.epochs}};
  j["proposal"] = {{"center_noise", c.proposal.jitter.center_noise},
                   {"scale_noise", c.proposal.jitter.scale_noise},
                   {"proposals_per_gt", c.proposal.jitter.proposals_per_gt},
                   {"background_count", c.proposal.jitter.background_count},
                   {"minibatch_size", c.proposal.minibatch_size},
                   {"bg_fg_ratio", c.proposal.bg_fg_ratio},
                   {"match_threshold", c.proposal.match_threshold}};
  j["eval"] = {{"score_threshold", c.eval.score_threshold},
               {"nms_iou", c.eval.nms_iou},
               {"ap_iou", c.eval.ap_iou},
               {"max_detections", c.eval.max_detections},
               {"clip_boxes", c.eval.clip_boxes},
               {"interpolation", interp_name(c.eval.interpolation)},
               {"proposal_seed", c.eval.proposal_seed}};
  j["data"] = {{"train", data_role_to_json(c.train_data)},
               {"test", data_role_to_json(c.test_data)}};
  return j.dump(2);
}

std::string config_checksum(const ExperimentConfig& config) {
  const std::string bound =
      experiment_config_to_json(config) + "\n" + kVersion;
  return hex64(fnv1a64(bound));
}

Dataset load_data(const DataRole& role) {
  if (role.path) return read_dataset(*role.path);
  if (role.synth) return generate_dataset(*role.synth);
  throw std::runtime_error("data role has neither synth nor path");
}

TrainedModel train(const ExperimentConfig& config, const Dataset& train_data,
                   const Dataset* test_data) {
  const auto start = std::chrono::steady_clock::now();

  HeadConfig head = config.head;
  head.num_classes = train_data.config.num_classes;
  const int channels = train_data.config.channels;

  TrainedModel out;
  out.model = std::make_unique<HeadModel>(head, channels, config.seed);
  out.record.config_json = experiment_config_to_json(config);
  out.record.config_checksum = config_checksum(config);
  out.record.code_version = kVersion;

  SgdConfig sgd{config.optimizer.learning_rate, config.optimizer.momentum};

  // epoch-boundary snapshot for divergence rollback
  auto snapshot = [&] {
    std::vector<Eigen::VectorXd> values;
    for (const auto& p : out.model->params().all())
      values.push_back(p->value.flat());
    return values;
  };
  auto restore = [&](const std::vector<Eigen::VectorXd>& values) {
    size_t i = 0;
    for (const auto& p : out.model->params().all())
      p->value.flat() = values[i++];
  };
  std::vector<Eigen::VectorXd> last_good = snapshot();

  for (int epoch = 1; epoch <= config.optimizer.epochs && !out.record.diverged;
       ++epoch) {
    EpochLoss sums;
    int steps = 0;
    for (size_t si = 0; si < train_data.scenes.size(); ++si) {
      const Scene* scene = &train_data.scenes[si];
      Scene flipped;
      if (config.augment_flip) {
        Rng coin(derive_seed(config.seed, "flip", epoch, si));
        if (coin.uniform() < 0.5) {
          flipped = horizontal_flip(*scene);
          scene = &flipped;
        }
      }
      ProposalBatch all = jitter_proposals(
          scene->ground_truths, config.proposal.jitter,
          derive_seed(config.seed, "proposals", epoch, si), scene->image_w,
          scene->image_h);
      if (all.proposals.empty()) continue;
      ProposalBatch mb = sample_minibatch(
          all, config.proposal.minibatch_size, config.proposal.bg_fg_ratio,
          derive_seed(config.seed, "sample", epoch, si));
      if (mb.proposals.empty()) continue;

      TrainingBatch tb = to_training_batch(mb, scene->ground_truths);
      const LossBreakdown loss =
          out.model->compute_loss(scene->features, tb, true);
      if (!std::isfinite(loss.total)) {
        out.record.diverged = true;
        out.record.diagnostics.push_back(
            "training diverged at epoch " + std::to_string(epoch) +
            ", scene " + scene->id + "; rolled back to last epoch boundary");
        restore(last_good);
        break;
      }
      sgd_step(out.model->params(), sgd);
      sums.total += loss.total;
      sums.cls += loss.cls;
      sums.off += loss.off;
      sums.sca += loss.sca;
      ++steps;
    }
    if (out.record.diverged) break;
    if (steps > 0) {
      sums.total /= steps;
      sums.cls /= steps;
      sums.off /= steps;
      sums.sca /= steps;
    }
    out.record.loss_curve.push_back(sums);
    last_good = snapshot();
  }

  if (!out.record.diverged && test_data != nullptr)
    out.record.eval = evaluate_model(*out.model, *test_data, config.proposal,
                                     config.eval);
  out.record.checkpoint_checksum = param_payload_checksum(out.model->params());
  out.record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  return out;
}

EvalReport evaluate_model(const HeadModel& model, const Dataset& data,
                          const ProposalConfig& proposals,
                          const EvalProtocol& protocol) {
  if (model.config().num_classes != data.config.num_classes)
    throw std::runtime_error(
        "model and dataset disagree on the number of classes");
  const int k = data.config.num_classes;

  std::vector<ImageEvalInput> images;
  for (size_t si = 0; si < data.scenes.size(); ++si) {
    const Scene& scene = data.scenes[si];
    ImageEvalInput image;
    image.ground_truths = scene.ground_truths;

    ProposalBatch batch = jitter_proposals(
        scene.ground_truths, proposals.jitter,
        derive_seed(protocol.proposal_seed, "eval-proposals", si),
        scene.image_w, scene.image_h);
    if (!batch.proposals.empty()) {
      const HeadOutput out = model.forward(scene.features, batch.proposals);
      std::vector<Detection> dets;
      for (size_t r = 0; r < batch.proposals.size(); ++r) {
        const auto p = softmax_row(out.class_logits, static_cast<Eigen::Index>(r));
        Box box = out.refined_boxes[r];
        if (protocol.clip_boxes)
          box = clip_to_image(box, scene.image_w, scene.image_h);
        for (int c = 1; c <= k; ++c)
          if (p[c] > protocol.score_threshold)
            dets.push_back({box, c, p[c]});
      }
      for (int idx : nms(dets, protocol.nms_iou))
        image.detections.push_back(dets[idx]);
    }
    images.push_back(std::move(image));
  }
  return pascal_ap(images, protocol.ap_iou, protocol.max_detections,
                   protocol.interpolation);
}

DeltaDistribution delta_statistics(const HeadModel& model, const Dataset& data,
                                   const ProposalConfig& proposals,
                                   const EvalProtocol& protocol,
                                   double bin_width) {
  if (!is_sequential(model.config().architecture))
    throw std::runtime_error(
        "delta statistics need a sequential architecture (no intermediate "
        "box to measure); got " +
        std::string(architecture_name(model.config().architecture)));

  DeltaStatsAccumulator acc(bin_width, model.config().delta_scale);
  for (size_t si = 0; si < data.scenes.size(); ++si) {
    const Scene& scene = data.scenes[si];
    ProposalBatch batch = jitter_proposals(
        scene.ground_truths, proposals.jitter,
        derive_seed(protocol.proposal_seed, "eval-proposals", si),
        scene.image_w, scene.image_h);
    if (batch.proposals.empty()) continue;
    const HeadOutput out = model.forward(scene.features, batch.proposals);
    for (size_t r = 0; r < batch.proposals.size(); ++r) {
      if (!batch.is_foreground[r]) continue;
      const Box& gt =
          scene.ground_truths[static_cast<size_t>(batch.matched_gt[r])].box;
      acc.add(batch.proposals[r], (*out.intermediate_boxes)[r], gt);
    }
  }
  return acc.finish();
}

std::vector<AblationRow> ablation_suite(const std::string& suite) {
  auto arch_row = [](const char* name, Architecture a) {
    return AblationRow{name, a, std::nullopt};
  };
  if (suite == "model-design") {
    return {arch_row("neither", Architecture::kSingle),
            arch_row("sequence_only", Architecture::kSequentialOffsetScaling),
            arch_row("decouple_only", Architecture::kDecoupledOffsetScaling),
            arch_row("both", Architecture::kDecoupledSequential)};
  }
  if (suite == "branch") {
    std::vector<AblationRow> rows;
    for (int conv = 0; conv <= 2; ++conv) {
      for (int fc = 1; fc <= 2; ++fc) {
        BranchSpec spec;
        spec.num_conv = conv;
        spec.num_fc = fc;
        rows.push_back({"conv" + std::to_string(conv) + "_fc" +
                            std::to_string(fc),
                        Architecture::kDecoupledSequential, spec});
      }
    }
    return rows;
  }
  if (suite == "decouple") {
    return {arch_row("no_decouple", Architecture::kSingle),
            arch_row("double_branch", Architecture::kDouble),
            arch_row("offset_plus_scaling", Architecture::kDecoupledOffsetScaling),
            arch_row("horizontal_plus_vertical",
                     Architecture::kDecoupledHorizontalVertical),
            arch_row("fully_decoupled", Architecture::kDecoupledFull)};
  }
  if (suite == "sequence") {
    return {arch_row("parallel", Architecture::kSingle),
            arch_row("offset_then_scaling",
                     Architecture::kSequentialOffsetScaling),
            arch_row("scaling_then_offset",
                     Architecture::kSequentialScalingOffset),
            arch_row("horizontal_then_vertical",
                     Architecture::kSequentialHorizontalVertical),
            arch_row("vertical_then_horizontal",
                     Architecture::kSequentialVerticalHorizontal)};
  }
  throw std::runtime_error(
      "unknown suite \"" + suite +
      "\"; expected model-design, branch, decouple or sequence");
}

AblationReport run_ablation(const std::string& suite,
                            const ExperimentConfig& base, int num_seeds,
                            const Dataset& train_data, const Dataset& test_data,
                            const std::string& archive_dir) {
  if (num_seeds < 1) throw std::runtime_error("ablation needs at least one seed");
  AblationReport report;
  report.suite = suite;
  report.num_seeds = num_seeds;

  for (const AblationRow& row : ablation_suite(suite)) {
    AblationCell cell;
    cell.row = row.name;
    cell.architecture = row.architecture;
    double sum = 0, sum2 = 0;
    double bucket_sum[3] = {0, 0, 0};
    for (int s = 0; s < num_seeds; ++s) {
      ExperimentConfig cfg = base;
      cfg.head.architecture = row.architecture;
      if (row.branch) cfg.head.branch = *row.branch;
      cfg.seed = base.seed + static_cast<std::uint64_t>(s);

      TrainedModel run = train(cfg, train_data, &test_data);
      const double ap = run.record.eval ? run.record.eval->mean_ap : 0.0;
      cell.ap_per_seed.push_back(ap);
      sum += ap;
      sum2 += ap * ap;
      if (run.record.eval) {
        const EvalReport& e = *run.record.eval;
        const std::optional<double> buckets[3] = {e.ap_small, e.ap_medium,
                                                  e.ap_large};
        for (int b = 0; b < 3; ++b) {
          if (buckets[b]) {
            bucket_sum[b] += *buckets[b];
            ++cell.buckets_present[b];
          }
        }
      }
      if (!archive_dir.empty()) {
        const fs::path dir =
            fs::path(archive_dir) / row.name / ("seed" + std::to_string(s));
        fs::create_directories(dir);
        write_file_text((dir / "run_record.json").string(),
                        run_record_json(run.record));
        write_file_text((dir / "loss_curve.csv").string(),
                        loss_curve_csv(run.record.loss_curve));
        if (run.record.eval)
          write_file_text((dir / "eval_report.csv").string(),
                          eval_report_csv(*run.record.eval));
      }
    }
    cell.ap_mean = sum / num_seeds;
    cell.ap_std =
        std::sqrt(std::max(0.0, sum2 / num_seeds - cell.ap_mean * cell.ap_mean));
    for (int b = 0; b < 3; ++b)
      if (cell.buckets_present[b] > 0) {
        const double m = bucket_sum[b] / cell.buckets_present[b];
        if (b == 0) cell.ap_small_mean = m;
        if (b == 1) cell.ap_medium_mean = m;
        if (b == 2) cell.ap_large_mean = m;
      }
    report.cells.push_back(std::move(cell));
  }
  return report;
}

// ---- report writers ----

std::string eval_report_csv(const EvalReport& report) {
  std::string out = "row,class,ap,gt_count,det_count\n";
  int total_gts = 0, total_dets = 0;
  for (const ClassAp& c : report.per_class) {
    out += "class," + std::to_string(c.category) + "," + fmt_double(c.ap) +
           "," + std::to_string(c.gt_count) + "," +
           std::to_string(c.det_count) + "\n";
    total_gts += c.gt_count;
    total_dets += c.det_count;
  }
  out += "mean,," + fmt_double(report.mean_ap) + "," +
         std::to_string(total_gts) + "," + std::to_string(total_dets) + "\n";
  const char* names[3] = {"small", "medium", "large"};
  const std::optional<double> buckets[3] = {report.ap_small, report.ap_medium,
                                            report.ap_large};
  for (int b = 0; b < 3; ++b) {
    out += std::string(names[b]) + ",," +
           (buckets[b] ? fmt_double(*buckets[b]) : std::string()) + "," +
           std::to_string(report.gt_count[b]) + "," +
           std::to_string(report.det_count[b]) + "\n";
  }
  return out;
}

std::string loss_curve_csv(const std::vector<EpochLoss>& curve) {
  std::string out = "epoch,total,cls,off,sca\n";
  for (size_t i = 0; i < curve.size(); ++i) {
    out += std::to_string(i + 1) + "," + fmt_double(curve[i].total) + "," +
           fmt_double(curve[i].cls) + "," + fmt_double(curve[i].off) + "," +
           fmt_double(curve[i].sca) + "\n";
  }
  return out;
}

std::string delta_stats_csv(const DeltaDistribution& dist) {
  std::string out =
      "kind,component,phase,count,mean,stddev,bin_lo,bin_hi,bin_count\n";
  struct Row {
    const char* component;
    const char* phase;
    const ComponentStats* stats;
  };
  const Row rows[4] = {{"dx", "before", &dist.before_dx},
                       {"dy", "before", &dist.before_dy},
                       {"dx", "after", &dist.after_dx},
                       {"dy", "after", &dist.after_dy}};
  for (const Row& r : rows) {
    out += std::string("summary,") + r.component + "," + r.phase + "," +
           std::to_string(r.stats->count) + "," + fmt_double(r.stats->mean) +
           "," + fmt_double(r.stats->stddev) + ",,,\n";
  }
  for (const Row& r : rows) {
    for (const auto& [bin, count] : r.stats->histogram) {
      out += std::string("bin,") + r.component + "," + r.phase + ",,,," +
             fmt_double(bin * dist.bin_width) + "," +
             fmt_double((bin + 1) * dist.bin_width) + "," +
             std::to_string(count) + "\n";
    }
  }
  return out;
}

std::string ablation_csv(const AblationReport& report) {
  std::string out =
      "suite,row,architecture,num_seeds,ap_mean,ap_std,ap_small_mean,"
      "ap_medium_mean,ap_large_mean\n";
  for (const AblationCell& c : report.cells) {
    out += report.suite + "," + c.row + "," +
           architecture_name(c.architecture) + "," +
           std::to_string(report.num_seeds) + "," + fmt_double(c.ap_mean) +
           "," + fmt_double(c.ap_std) + ",";
    out += (c.buckets_present[0] ? fmt_double(c.ap_small_mean) : std::string()) + ",";
    out += (c.buckets_present[1] ? fmt_double(c.ap_medium_mean) : std::string()) + ",";
    out += (c.buckets_present[2] ? fmt_double(c.ap_large_mean) : std::string()) + "\n";
  }
  return out;
}

std::string run_record_json(const RunRecord& record) {
  json j;
  j["config"] = json::parse(record.config_json);
  j["config_checksum"] = record.config_checksum;
  j["code_version"] = record.code_version;
  json curve = json::array();
  for (const EpochLoss& e : record.loss_curve)
    curve.push_back({{"total", e.total},
                     {"cls", e.cls},
                     {"off", e.off},
                     {"sca", e.sca}});
  j["loss_curve"] = curve;
  if (record.eval) {
    json eval;
    eval["mean_ap"] = record.eval->mean_ap;
    json per_class = json::array();
    for (const ClassAp& c : record.eval->per_class)
      per_class.push_back({{"class", c.category},
                           {"ap", c.ap},
                           {"gt_count", c.gt_count},
                           {"det_count", c.det_count}});
    eval["per_class"] = per_class;
    if (record.eval->ap_small) eval["ap_small"] = *record.eval->ap_small;
    if (record.eval->ap_medium) eval["ap_medium"] = *record.eval->ap_medium;
    if (record.eval->ap_large) eval["ap_large"] = *record.eval->ap_large;
    j["eval"] = eval;
  }
  j["wall_seconds"] = record.wall_seconds;
  j["checkpoint_checksum"] = record.checkpoint_checksum;
  j["diverged"] = record.diverged;
  j["diagnostics"] = record.diagnostics;
  return j.dump(2);
}

// ---- file-level commands ----

void command_synth(const std::string& config_path, const std::string& out_path) {
  const ExperimentConfig config =
      parse_experiment_config(read_file_text(config_path));
  if (!config.train_data.synth)
    throw std::runtime_error("synth command needs data.train.synth in the config");
  const Dataset ds = generate_dataset(*config.train_data.synth);
  write_dataset(ds.scenes, ds.config, out_path);
}

void command_train(const std::string& config_path, const std::string& out_dir) {
  const ExperimentConfig config =
      parse_experiment_config(read_file_text(config_path));
  const std::string checksum = config_checksum(config);

  fs::create_directories(out_dir);
  const fs::path record_path = fs::path(out_dir) / "run_record.json";
  if (fs::exists(record_path)) {
    const json existing = json::parse(read_file_text(record_path.string()));
    if (existing.value("config_checksum", "") != checksum)
      throw std::runtime_error(
          "output directory holds a run record for a different config "
          "(checksum mismatch); refusing to overwrite");
  }

  const Dataset train_data = load_data(config.train_data);
  const Dataset test_data = load_data(config.test_data);
  TrainedModel run = train(config, train_data, &test_data);

  const fs::path ckpt = fs::path(out_dir) / "checkpoint.bin";
  save_checkpoint(run.model->params(),
                  checkpoint_meta(config, train_data.config.num_classes,
                                  train_data.config.channels)
                      .dump(),
                  ckpt.string());
  write_file_text((fs::path(out_dir) / "loss_curve.csv").string(),
                  loss_curve_csv(run.record.loss_curve));
  if (run.record.eval)
    write_file_text((fs::path(out_dir) / "eval_report.csv").string(),
                    eval_report_csv(*run.record.eval));
  write_file_text(record_path.string(), run_record_json(run.record));

  if (run.record.diverged)
    throw std::runtime_error(run.record.diagnostics.empty()
                                 ? "training diverged"
                                 : run.record.diagnostics.back());
}

namespace {

struct RestoredModel {
  std::unique_ptr<HeadModel> model;
  ExperimentConfig config;
};

RestoredModel restore_model(const std::string& checkpoint_path,
                            const Dataset& data) {
  const LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
  const json meta = json::parse(ckpt.meta_json);
  const int k = meta.at("num_classes").get<int>();
  const int channels = meta.at("feature_channels").get<int>();
  if (k != data.config.num_classes)
    throw std::runtime_error("checkpoint was trained for " +
                             std::to_string(k) + " classes but the dataset has " +
                             std::to_string(data.config.num_classes));
  if (channels != data.config.channels)
    throw std::runtime_error("checkpoint feature channels do not match dataset");

  RestoredModel out;
  out.config = parse_experiment_config(meta.at("config").dump());
  HeadConfig head = out.config.head;
  head.num_classes = k;
  out.model = std::make_unique<HeadModel>(head, channels, out.config.seed);
  restore_parameters(ckpt, out.model->params());
  return out;
}

}  // namespace

void command_eval(const std::string& checkpoint_path,
                  const std::string& data_path, const std::string& report_csv) {
  const Dataset data = read_dataset(data_path);
  RestoredModel rm = restore_model(checkpoint_path, data);
  const EvalReport report =
      evaluate_model(*rm.model, data, rm.config.proposal, rm.config.eval);
  write_file_text(report_csv, eval_report_csv(report));
}

void command_ablate(const std::string& suite, const std::string& out_dir,
                    const std::optional<std::string>& config_path,
                    int num_seeds) {
  ExperimentConfig base = default_experiment_config();
  if (config_path)
    base = parse_experiment_config(read_file_text(*config_path));
  const Dataset train_data = load_data(base.train_data);
  const Dataset test_data = load_data(base.test_data);
  fs::create_directories(out_dir);
  const AblationReport report = run_ablation(
      suite, base, num_seeds, train_data, test_data,
      (fs::path(out_dir) / "rows").string());
  write_file_text((fs::path(out_dir) / (suite + ".csv")).string(),
                  ablation_csv(report));
}

void command_stats(const std::string& checkpoint_path,
                   const std::string& data_path, const std::string& out_csv) {
  const Dataset data = read_dataset(data_path);
  RestoredModel rm = restore_model(checkpoint_path, data);
  const DeltaDistribution dist =
      delta_statistics(*rm.model, data, rm.config.proposal, rm.config.eval);
  write_file_text(out_csv, delta_stats_csv(dist));
}

}  // namespace headlab
