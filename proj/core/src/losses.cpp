#include "ssd/losses.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace ssd {

namespace {
constexpr double kEps = 1e-7;
}

std::vector<double> calculate_class_weights(const std::vector<int64_t>& class_counts) {
  check(!class_counts.empty(), "calculate_class_weights: empty counts");
  int64_t total = 0;
  int nonzero = 0;
  for (int64_t c : class_counts) {
    check(c >= 0, "calculate_class_weights: negative count ", c);
    total += c;
    nonzero += c > 0 ? 1 : 0;
  }
  check(nonzero > 0, "calculate_class_weights: all counts are zero");

  std::vector<double> weights(class_counts.size(), 0.0);
  double max_raw = 0.0;
  for (size_t i = 0; i < class_counts.size(); ++i) {
    if (class_counts[i] > 0) {
      weights[i] = double(total) / (double(nonzero) * double(class_counts[i]));
      max_raw = std::max(max_raw, weights[i]);
    }
  }
  for (size_t i = 0; i < class_counts.size(); ++i)
    if (class_counts[i] == 0) weights[i] = max_raw;

  // Rescale to frequency-weighted mean 1 so the loss scale is count-invariant.
  double mean = 0.0;
  for (size_t i = 0; i < class_counts.size(); ++i)
    mean += (double(class_counts[i]) / double(total)) * weights[i];
  for (auto& w : weights) w /= mean;
  return weights;
}

double focal_loss(double p, int class_id, const FocalParams& params) {
  check(p >= 0 && p <= 1, "focal_loss: p must lie in [0,1], got ", p);
  check(params.gamma >= 0, "focal_loss: gamma must be >= 0");
  double alpha = 1.0;
  if (!params.class_weights.empty()) {
    check(class_id >= 0 && size_t(class_id) < params.class_weights.size(),
          "focal_loss: class id ", class_id, " outside ", params.class_weights.size(),
          " weights");
    alpha = params.class_weights[size_t(class_id)];
  }
  const double pc = std::max(p, kEps);
  return -alpha * std::pow(1.0 - pc, params.gamma) * std::log(pc);
}

double objectness_bce(double pred, int target) {
  check(target == 0 || target == 1, "objectness_bce: target must be 0 or 1, got ", target);
  check(pred >= 0 && pred <= 1, "objectness_bce: pred must lie in [0,1], got ", pred);
  const double p = std::clamp(pred, kEps, 1.0 - kEps);
  return -(target * std::log(p) + (1 - target) * std::log(1.0 - p));
}

std::string LossBreakdown::to_json() const {
  nlohmann::json j{{"cls", cls},
                   {"reg", reg},
                   {"obj", obj},
                   {"total", total},
                   {"lambda_cls", weights.cls},
                   {"lambda_reg", weights.reg},
                   {"lambda_obj", weights.obj}};
  return j.dump();
}

LossBreakdown total_loss(const AssignmentResult& assignment,
                         const std::vector<Prediction>& preds, const std::vector<BBox>& gts,
                         const FocalParams& focal, const LossWeights& lambdas) {
  check(assignment.preds.size() == preds.size(),
        "total_loss: assignment covers ", assignment.preds.size(), " predictions but ",
        preds.size(), " given");
  LossBreakdown out;
  out.weights = lambdas;
  if (preds.empty()) return out;

  double cls_sum = 0.0, obj_sum = 0.0, reg_sum = 0.0;
  int positives = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    const auto& entry = assignment.preds[i];
    const auto& scores = preds[i].class_scores;
    const int target_class =
        entry.positive ? gts[size_t(entry.matched_gt)].class_id : -1;
    for (size_t c = 0; c < scores.size(); ++c) {
      const double p = scores[c];
      if (int(c) == target_class) {
        cls_sum += focal_loss(p, int(c), focal);
      } else {
        // background target: focal on (1-p) with unit weight
        const double q = std::max(1.0 - p, kEps);
        cls_sum += -std::pow(p, focal.gamma) * std::log(q);
      }
    }
    obj_sum += objectness_bce(preds[i].box.conf, entry.positive ? 1 : 0);
    if (entry.positive) {
      reg_sum += siou_loss(preds[i].box, gts[size_t(entry.matched_gt)]);
      ++positives;
    }
  }
  out.cls = cls_sum / double(preds.size());
  out.obj = obj_sum / double(preds.size());
  out.reg = positives > 0 ? reg_sum / double(positives) : 0.0;
  out.total = lambdas.cls * out.cls + lambdas.reg * out.reg + lambdas.obj * out.obj;
  return out;
}

// ---------------------------------------------------------------------------

ag::Var focal_pos_terms(const ag::Var& p, const Tensor& alpha, double gamma) {
  check(alpha.same_shape(p.value()), "focal_pos_terms: alpha shape ", alpha.shape_str(),
        " does not match p ", p.value().shape_str());
  ag::Var pc = ag::clamp(p, float(kEps), 1.0f);
  ag::Var one_minus = ag::add_scalar(ag::neg(pc), 1.0f);
  ag::Var weighted = ag::mul(ag::pow_scalar(one_minus, float(gamma)), ag::log(pc));
  return ag::neg(ag::mul(weighted, ag::constant(alpha)));
}

ag::Var focal_neg_terms(const ag::Var& p, double gamma) {
  ag::Var pc = ag::clamp(p, 0.0f, 1.0f - float(kEps));
  ag::Var one_minus = ag::add_scalar(ag::neg(pc), 1.0f);
  return ag::neg(ag::mul(ag::pow_scalar(pc, float(gamma)), ag::log(one_minus)));
}

ag::Var bce_terms(const ag::Var& p, const Tensor& targets) {
  check(targets.same_shape(p.value()), "bce_terms: target shape ", targets.shape_str(),
        " does not match p ", p.value().shape_str());
  ag::Var pc = ag::clamp(p, float(kEps), 1.0f - float(kEps));
  ag::Var t = ag::constant(targets);
  Tensor ones_minus_t = targets;
  for (int64_t i = 0; i < ones_minus_t.size(); ++i) {
    check(targets[i] == 0.0f || targets[i] == 1.0f, "bce_terms: target must be 0 or 1");
    ones_minus_t[i] = 1.0f - targets[i];
  }
  ag::Var pos = ag::mul(t, ag::log(pc));
  ag::Var negp = ag::mul(ag::constant(ones_minus_t),
                         ag::log(ag::add_scalar(ag::neg(pc), 1.0f)));
  return ag::neg(ag::add(pos, negp));
}

ag::Var siou_terms(const ag::Var& pcx, const ag::Var& pcy, const ag::Var& pw,
                   const ag::Var& ph, const Tensor& gcx, const Tensor& gcy,
                   const Tensor& gw, const Tensor& gh) {
  using namespace ag;
  const int64_t n = pcx.value().size();
  check(pcy.value().size() == n && pw.value().size() == n && ph.value().size() == n &&
            gcx.size() == n && gcy.size() == n && gw.size() == n && gh.size() == n,
        "siou_terms: column length mismatch");

  Var cgx = constant(gcx), cgy = constant(gcy), cgw = constant(gw), cgh = constant(gh);
  Var half_pw = mul_scalar(pw, 0.5f), half_ph = mul_scalar(ph, 0.5f);
  Var half_gw = constant(scale(gw, 0.5f)), half_gh = constant(scale(gh, 0.5f));

  Var px1 = sub(pcx, half_pw), px2 = add(pcx, half_pw);
  Var py1 = sub(pcy, half_ph), py2 = add(pcy, half_ph);
  Var gx1 = sub(cgx, half_gw), gx2 = add(cgx, half_gw);
  Var gy1 = sub(cgy, half_gh), gy2 = add(cgy, half_gh);

  Var zero = constant(Tensor::zeros({int(n)}));
  Var iw = emax(sub(emin(px2, gx2), emax(px1, gx1)), zero);
  Var ih = emax(sub(emin(py2, gy2), emax(py1, gy1)), zero);
  Var inter = mul(iw, ih);
  Var uni = sub(add(mul(pw, ph), constant(mul(Tensor(gw), Tensor(gh)))), inter);
  Var iou_v = div(inter, emax(uni, constant(Tensor::full({int(n)}, 1e-12f))));

  Var dx = sub(cgx, pcx), dy = sub(cgy, pcy);
  Var sigma2 = add(mul(dx, dx), mul(dy, dy));
  Var angle_num = mul_scalar(mul(abs(dx), abs(dy)), 2.0f);
  Var angle = div(angle_num, emax(sigma2, constant(Tensor::full({int(n)}, 1e-12f))));

  Var cw = sub(emax(px2, gx2), emin(px1, gx1));
  Var chh = sub(emax(py2, gy2), emin(py1, gy1));
  Var rx = div(dx, cw), ry = div(dy, chh);
  Var rho_x = mul(rx, rx), rho_y = mul(ry, ry);
  Var two_minus = add_scalar(neg(angle), 2.0f);
  Var dist = add(add_scalar(neg(exp(neg(mul(two_minus, rho_x)))), 1.0f),
                 add_scalar(neg(exp(neg(mul(two_minus, rho_y)))), 1.0f));

  Var ow = div(abs(sub(pw, cgw)), emax(pw, cgw));
  Var oh = div(abs(sub(ph, cgh)), emax(ph, cgh));
  Var shape = add(pow_scalar(add_scalar(neg(exp(neg(ow))), 1.0f), 4.0f),
                  pow_scalar(add_scalar(neg(exp(neg(oh))), 1.0f), 4.0f));

  Var loss = add(add_scalar(neg(iou_v), 1.0f), mul_scalar(add(dist, shape), 0.5f));
  return loss;
}

}  // namespace ssd
