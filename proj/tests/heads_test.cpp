#include "headlab/heads.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <cmath>

using namespace headlab;

namespace {

constexpr Architecture kAllArchitectures[] = {
    Architecture::kSingle,
    Architecture::kDouble,
    Architecture::kDecoupledOffsetScaling,
    Architecture::kDecoupledHorizontalVertical,
    Architecture::kDecoupledFull,
    Architecture::kSequentialOffsetScaling,
    Architecture::kSequentialScalingOffset,
    Architecture::kSequentialHorizontalVertical,
    Architecture::kSequentialVerticalHorizontal,
    Architecture::kDecoupledSequential,
    Architecture::kDecoupledSequentialCascade,
};

HeadConfig tiny_config(Architecture arch) {
  HeadConfig cfg;
  cfg.architecture = arch;
  cfg.branch.num_fc = 2;
  cfg.branch.fc_width = 8;
  cfg.num_classes = 3;
  cfg.pool = {3, 2};
  return cfg;
}

FeatureMap tiny_map(std::uint64_t seed = 1) {
  Rng rng(seed);
  FeatureMap m = FeatureMap::zeros(6, 6, 4, 2.0);
  for (Eigen::Index i = 0; i < m.values.size(); ++i)
    m.values[i] = rng.uniform(-1, 1);
  return m;
}

std::vector<Box> tiny_proposals() {
  return {Box{5.0, 6.0, 6.0, 5.0}, Box{8.0, 7.0, 4.0, 7.0}};
}

void zero_parameters(HeadModel& model) {
  for (const auto& p : model.params().all()) p->value.flat().setZero();
}

void set_bias(HeadModel& model, const std::string& name,
              std::initializer_list<double> values) {
  Parameter* p = model.params().find(name);
  REQUIRE(p != nullptr);
  REQUIRE(p->value.size() == static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double v : values) p->value[i++] = v;
}

TrainingBatch tiny_batch(const std::vector<Box>& proposals) {
  TrainingBatch b;
  b.proposals = proposals;
  b.labels = {1, 0};
  b.matched_gt = {Box{5.5, 6.5, 7.0, 5.5}, Box{}};
  b.scene_gts = {{Box{5.5, 6.5, 7.0, 5.5}, 1}};
  return b;
}

bool grads_all_zero(const HeadModel& model, const std::string& prefix) {
  for (const auto& p : model.params().all()) {
    if (p->name.rfind(prefix, 0) != 0) continue;
    for (Eigen::Index i = 0; i < p->grad.size(); ++i)
      if (p->grad[i] != 0.0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("zero networks leave the proposals untouched for every architecture") {
  const FeatureMap map = tiny_map();
  const std::vector<Box> proposals = tiny_proposals();
  for (Architecture arch : kAllArchitectures) {
    CAPTURE(architecture_name(arch));
    HeadModel model(tiny_config(arch), map.channels, 7);
    zero_parameters(model);
    const HeadOutput out = model.forward(map, proposals);
    REQUIRE(out.refined_boxes.size() == proposals.size());
    for (size_t i = 0; i < proposals.size(); ++i) {
      CHECK(out.refined_boxes[i].x == proposals[i].x);
      CHECK(out.refined_boxes[i].y == proposals[i].y);
      CHECK(out.refined_boxes[i].w == proposals[i].w);
      CHECK(out.refined_boxes[i].h == proposals[i].h);
    }
    if (out.intermediate_boxes) {
      for (size_t i = 0; i < proposals.size(); ++i) {
        CHECK((*out.intermediate_boxes)[i].x == proposals[i].x);
        CHECK((*out.intermediate_boxes)[i].w == proposals[i].w);
      }
    }
  }
}

TEST_CASE("output shape contract") {
  const FeatureMap map = tiny_map();
  const std::vector<Box> proposals = tiny_proposals();
  for (Architecture arch : kAllArchitectures) {
    CAPTURE(architecture_name(arch));
    HeadModel model(tiny_config(arch), map.channels, 3);
    const HeadOutput out = model.forward(map, proposals);
    CHECK(out.class_logits.shape() ==
          std::vector<Eigen::Index>{2, 4});  // K+1 with K=3
    CHECK(out.offset.shape() == std::vector<Eigen::Index>{2, 2});
    CHECK(out.scaling.shape() == std::vector<Eigen::Index>{2, 2});
    CHECK(out.intermediate_boxes.has_value() == is_sequential(arch));
    CHECK(out.stage_refined.empty() == !is_cascade(arch));
  }
}

TEST_CASE("an oracle branch reproduces the ground truth box") {
  const FeatureMap map = tiny_map();
  const Box proposal{5.0, 6.0, 6.0, 5.0};
  const Box gt{6.2, 5.1, 8.0, 4.0};
  const Delta d = encode_delta(proposal, gt);

  SUBCASE("single head emits the full delta") {
    HeadModel model(tiny_config(Architecture::kSingle), map.channels, 7);
    zero_parameters(model);
    set_bias(model, "proj_reg0.bias", {d.dx, d.dy, d.dw, d.dh});
    const HeadOutput out = model.forward(map, {&proposal, 1});
    CHECK(std::abs(out.refined_boxes[0].x - gt.x) < 1e-6);
    CHECK(std::abs(out.refined_boxes[0].y - gt.y) < 1e-6);
    CHECK(std::abs(out.refined_boxes[0].w - gt.w) < 1e-6);
    CHECK(std::abs(out.refined_boxes[0].h - gt.h) < 1e-6);
  }

  SUBCASE("decoupled offset branch alone recovers the center") {
    HeadModel model(tiny_config(Architecture::kDecoupledOffsetScaling),
                    map.channels, 7);
    zero_parameters(model);
    set_bias(model, "proj_reg0.bias", {d.dx, d.dy});
    const HeadOutput out = model.forward(map, {&proposal, 1});
    CHECK(std::abs(out.refined_boxes[0].x - gt.x) < 1e-6);
    CHECK(std::abs(out.refined_boxes[0].y - gt.y) < 1e-6);
    CHECK(out.refined_boxes[0].w == proposal.w);
    CHECK(out.refined_boxes[0].h == proposal.h);
  }

  SUBCASE("sequential offset-then-scaling recovers the full box") {
    // step-2 scaling targets encoded against the shifted box equal the
    // proposal encoding because the offset step preserves size
    HeadModel model(tiny_config(Architecture::kSequentialOffsetScaling),
                    map.channels, 7);
    zero_parameters(model);
    set_bias(model, "proj_reg0.bias", {d.dx, d.dy});
    set_bias(model, "proj_reg1.bias", {d.dw, d.dh});
    const HeadOutput out = model.forward(map, {&proposal, 1});
    CHECK(std::abs(out.refined_boxes[0].x - gt.x) < 1e-6);
    CHECK(std::abs(out.refined_boxes[0].w - gt.w) < 1e-6);
    REQUIRE(out.intermediate_boxes.has_value());
    CHECK(std::abs((*out.intermediate_boxes)[0].x - gt.x) < 1e-6);
    CHECK((*out.intermediate_boxes)[0].w == proposal.w);
  }

  SUBCASE("standalone sequential branches recover the full box") {
    HeadModel model(tiny_config(Architecture::kDecoupledSequential),
                    map.channels, 7);
    zero_parameters(model);
    set_bias(model, "proj_reg0.bias", {d.dx, d.dy});
    set_bias(model, "proj_reg1.bias", {d.dw, d.dh});
    const HeadOutput out = model.forward(map, {&proposal, 1});
    CHECK(std::abs(out.refined_boxes[0].x - gt.x) < 1e-6);
    CHECK(std::abs(out.refined_boxes[0].y - gt.y) < 1e-6);
    CHECK(std::abs(out.refined_boxes[0].w - gt.w) < 1e-6);
    CHECK(std::abs(out.refined_boxes[0].h - gt.h) < 1e-6);
  }

  SUBCASE("zero scaling branch: ground-truth center, proposal size") {
    HeadModel model(tiny_config(Architecture::kDecoupledSequential),
                    map.channels, 7);
    zero_parameters(model);
    set_bias(model, "proj_reg0.bias", {d.dx, d.dy});
    const HeadOutput out = model.forward(map, {&proposal, 1});
    CHECK(std::abs(out.refined_boxes[0].x - gt.x) < 1e-6);
    CHECK(out.refined_boxes[0].w == proposal.w);
    CHECK(out.refined_boxes[0].h == proposal.h);
  }
}

TEST_CASE("branch parameter sets are disjoint and counted per the family") {
  const int channels = 4;

  HeadModel dbl(tiny_config(Architecture::kDouble), channels, 7);
  int h1 = 0, h2 = 0;
  for (const auto& p : dbl.params().all()) {
    if (p->name.rfind("h1.", 0) == 0) ++h1;
    if (p->name.rfind("h2.", 0) == 0) ++h2;
  }
  CHECK(h1 > 0);
  CHECK(h2 > 0);

  HeadModel full(tiny_config(Architecture::kDecoupledFull), channels, 7);
  int reg_branches = 0, reg_projs = 0, cls_projs = 0;
  for (const auto& p : full.params().all()) {
    if (p->name == "h2.fc0.weight" || p->name == "h3.fc0.weight" ||
        p->name == "h4.fc0.weight" || p->name == "h5.fc0.weight")
      ++reg_branches;
    if (p->name.rfind("proj_reg", 0) == 0 && p->name.ends_with(".weight"))
      ++reg_projs;
    if (p->name == "proj_cls.weight") ++cls_projs;
  }
  CHECK(reg_branches == 4);
  CHECK(reg_projs == 4);
  CHECK(cls_projs == 1);
}

TEST_CASE("classification loss does not touch the regression branch of the "
          "double head") {
  const FeatureMap map = tiny_map();
  HeadConfig cfg = tiny_config(Architecture::kDouble);
  cfg.loss.alpha = 0.0;
  cfg.loss.beta = 0.0;  // only the classification term contributes
  HeadModel model(cfg, map.channels, 11);
  model.compute_loss(map, tiny_batch(tiny_proposals()), true);
  CHECK(grads_all_zero(model, "h2."));
  CHECK(!grads_all_zero(model, "h1."));
}

TEST_CASE("parameter count ordering across the family") {
  const int channels = 4;
  const auto count = [&](Architecture a) {
    return HeadModel(tiny_config(a), channels, 7).parameter_count();
  };
  const auto single = count(Architecture::kSingle);
  const auto dbl = count(Architecture::kDouble);
  const auto dec = count(Architecture::kDecoupledOffsetScaling);
  const auto dsdh = count(Architecture::kDecoupledSequential);
  CHECK(single < dbl);
  CHECK(dbl <= dec);
  CHECK(dec <= dsdh);
  // the standalone sequential head reuses the decoupled branch layout, so
  // the counts tie exactly
  CHECK(dec == dsdh);
}

TEST_CASE("pipeline consistency: refined equals the two-step decode of the "
          "emitted views") {
  const FeatureMap map = tiny_map(3);
  const std::vector<Box> proposals = tiny_proposals();
  for (Architecture arch : {Architecture::kSequentialOffsetScaling,
                            Architecture::kDecoupledSequential}) {
    CAPTURE(architecture_name(arch));
    HeadModel model(tiny_config(arch), map.channels, 21);
    const HeadOutput out = model.forward(map, proposals);
    for (size_t i = 0; i < proposals.size(); ++i) {
      const Box reconstructed = decode_scaling(
          decode_offset(proposals[i], out.offset.at(i, 0), out.offset.at(i, 1)),
          out.scaling.at(i, 0), out.scaling.at(i, 1));
      CHECK(out.refined_boxes[i].x == reconstructed.x);
      CHECK(out.refined_boxes[i].y == reconstructed.y);
      CHECK(out.refined_boxes[i].w == reconstructed.w);
      CHECK(out.refined_boxes[i].h == reconstructed.h);
    }
  }
}

TEST_CASE("loss decomposition is exact and foreground-free batches flag") {
  const FeatureMap map = tiny_map(5);
  for (Architecture arch : kAllArchitectures) {
    CAPTURE(architecture_name(arch));
    HeadConfig cfg = tiny_config(arch);
    cfg.loss.alpha = 0.7;
    cfg.loss.beta = 1.3;
    HeadModel model(cfg, map.channels, 13);
    const LossBreakdown l = model.compute_loss(map, tiny_batch(tiny_proposals()), false);
    CHECK(l.total == l.cls + cfg.loss.alpha * l.off + cfg.loss.beta * l.sca);
    CHECK(!l.no_foreground);

    TrainingBatch bg = tiny_batch(tiny_proposals());
    bg.labels = {0, 0};
    bg.scene_gts.clear();
    const LossBreakdown l2 = model.compute_loss(map, bg, false);
    CHECK(l2.no_foreground);
    CHECK(l2.off == 0.0);
    CHECK(l2.sca == 0.0);
    CHECK(l2.total == l2.cls);
  }
}

TEST_CASE("alpha zero cuts the offset branch unless gradients flow through "
          "the intermediate box") {
  const FeatureMap map = tiny_map(8);
  HeadConfig cfg = tiny_config(Architecture::kDecoupledSequential);
  cfg.loss.alpha = 0.0;

  SUBCASE("through-box gradients off: offset branch untouched") {
    cfg.through_box_gradients = false;
    HeadModel model(cfg, map.channels, 5);
    model.compute_loss(map, tiny_batch(tiny_proposals()), true);
    CHECK(grads_all_zero(model, "h2."));
    CHECK(grads_all_zero(model, "proj_reg0."));
    CHECK(!grads_all_zero(model, "h3."));
  }

  SUBCASE("through-box gradients on: the scaling loss reaches the offset "
          "branch via the re-pooled box") {
    cfg.through_box_gradients = true;
    HeadModel model(cfg, map.channels, 5);
    model.compute_loss(map, tiny_batch(tiny_proposals()), true);
    CHECK(!grads_all_zero(model, "h2."));
  }
}

TEST_CASE("dsdh branches are pairwise disjoint by name") {
  HeadModel model(tiny_config(Architecture::kDecoupledSequential), 4, 7);
  int h1 = 0, h2 = 0, h3 = 0;
  for (const auto& p : model.params().all()) {
    h1 += p->name.rfind("h1.", 0) == 0;
    h2 += p->name.rfind("h2.", 0) == 0;
    h3 += p->name.rfind("h3.", 0) == 0;
  }
  CHECK(h1 == 4);  // two fc layers, weight and bias each
  CHECK(h2 == 4);
  CHECK(h3 == 4);
}

TEST_CASE("cascade: one stage reproduces the standalone sequential head") {
  const FeatureMap map = tiny_map(9);
  const std::vector<Box> proposals = tiny_proposals();
  HeadConfig dsdh_cfg = tiny_config(Architecture::kDecoupledSequential);
  HeadConfig casc_cfg = tiny_config(Architecture::kDecoupledSequentialCascade);
  casc_cfg.cascade_stages = 1;
  HeadModel dsdh(dsdh_cfg, map.channels, 77);
  HeadModel cascade(casc_cfg, map.channels, 77);
  const HeadOutput a = dsdh.forward(map, proposals);
  const HeadOutput b = cascade.forward(map, proposals);
  CHECK(a.class_logits.flat() == b.class_logits.flat());
  for (size_t i = 0; i < proposals.size(); ++i) {
    CHECK(a.refined_boxes[i].x == b.refined_boxes[i].x);
    CHECK(a.refined_boxes[i].y == b.refined_boxes[i].y);
    CHECK(a.refined_boxes[i].w == b.refined_boxes[i].w);
    CHECK(a.refined_boxes[i].h == b.refined_boxes[i].h);
  }
}

TEST_CASE("cascade wiring: the second stage refines the first stage's boxes") {
  const FeatureMap map = tiny_map(10);
  const std::vector<Box> proposals = tiny_proposals();
  HeadConfig cfg = tiny_config(Architecture::kDecoupledSequentialCascade);
  cfg.cascade_stages = 2;
  HeadModel model(cfg, map.channels, 31);
  // silence stage 2: its decode becomes the identity on its input boxes
  for (const auto& p : model.params().all())
    if (p->name.rfind("stage1.", 0) == 0) p->value.flat().setZero();
  const HeadOutput out = model.forward(map, proposals);
  REQUIRE(out.stage_refined.size() == 2);
  for (size_t i = 0; i < proposals.size(); ++i) {
    CHECK(out.refined_boxes[i].x == out.stage_refined[0][i].x);
    CHECK(out.refined_boxes[i].w == out.stage_refined[0][i].w);
  }
}

TEST_CASE("per-class regression keeps the output contract") {
  const FeatureMap map = tiny_map(12);
  HeadConfig cfg = tiny_config(Architecture::kDecoupledSequential);
  cfg.per_class_regression = true;
  HeadModel model(cfg, map.channels, 19);
  const HeadOutput out = model.forward(map, tiny_proposals());
  CHECK(out.offset.shape() == std::vector<Eigen::Index>{2, 2});
  const LossBreakdown l = model.compute_loss(map, tiny_batch(tiny_proposals()), true);
  CHECK(std::isfinite(l.total));
}

TEST_CASE("perfect predictions leave only a vanishing classification term") {
  const FeatureMap map = tiny_map(2);
  const Box proposal{5.0, 6.0, 6.0, 5.0};
  const Box gt{6.2, 5.1, 8.0, 4.0};
  const Delta d = encode_delta(proposal, gt);
  HeadModel model(tiny_config(Architecture::kDecoupledSequential), map.channels, 7);
  zero_parameters(model);
  set_bias(model, "proj_reg0.bias", {d.dx, d.dy});
  set_bias(model, "proj_reg1.bias", {d.dw, d.dh});
  set_bias(model, "proj_cls.bias", {0.0, 1000.0, 0.0, 0.0});  // class 1 saturated

  TrainingBatch batch;
  batch.proposals = {proposal};
  batch.labels = {1};
  batch.matched_gt = {gt};
  batch.scene_gts = {{gt, 1}};
  const LossBreakdown l = model.compute_loss(map, batch, false);
  CHECK(l.off == doctest::Approx(0.0).epsilon(1e-10));
  CHECK(l.sca == doctest::Approx(0.0).epsilon(1e-10));
  CHECK(l.total == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(l.total == l.cls + l.off + l.sca);
}

TEST_CASE("end-to-end gradient checks on two spot-check architectures") {
  // with through-box gradients off the intermediate box is a stop-gradient,
  // so the finite-difference oracle replays the frozen geometry
  const FeatureMap map = tiny_map(14);
  for (Architecture arch : {Architecture::kDecoupledSequential,
                            Architecture::kSequentialScalingOffset}) {
    CAPTURE(architecture_name(arch));
    HeadConfig cfg = tiny_config(arch);
    cfg.branch.fc_width = 5;
    HeadModel model(cfg, map.channels, 23);
    TrainingBatch batch = tiny_batch(tiny_proposals());
    PipelineFreeze freeze;
    model.compute_loss(map, batch, false, nullptr, &freeze);
    auto loss = [&](bool grads) {
      return model.compute_loss(map, batch, grads, &freeze).total;
    };
    CHECK(gradient_check(model.params(), loss, 1e-5).max_rel_error < 1e-4);
  }
}

TEST_CASE("with through-box gradients on, plain finite differences agree") {
  const FeatureMap map = tiny_map(14);
  HeadConfig cfg = tiny_config(Architecture::kDecoupledSequential);
  cfg.branch.fc_width = 5;
  cfg.through_box_gradients = true;
  HeadModel model(cfg, map.channels, 23);
  TrainingBatch batch = tiny_batch(tiny_proposals());
  auto loss = [&](bool grads) {
    return model.compute_loss(map, batch, grads).total;
  };
  CHECK(gradient_check(model.params(), loss, 1e-5).max_rel_error < 1e-4);
}
