#include "shapegan/objective.hpp"

#include "shapegan/common.hpp"

namespace shapegan {

std::string adv_variant_to_string(AdvVariant v) {
  return v == AdvVariant::kMinimax ? "minimax" : "non-saturating";
}

AdvVariant adv_variant_from_string(const std::string& s) {
  if (s == "non-saturating" || s == "ns") return AdvVariant::kNonSaturating;
  if (s == "minimax" || s == "mm") return AdvVariant::kMinimax;
  throw ConfigError("unknown adversarial variant '" + s + "' (use non-saturating or minimax)");
}

void LossConfig::validate() const {
  if (!(lambda_recon >= 0.0) || !std::isfinite(lambda_recon))
    throw ConfigError("lambda_recon must be finite and >= 0");
  if (!(gamma_r1 >= 0.0) || !std::isfinite(gamma_r1))
    throw ConfigError("gamma_r1 must be finite and >= 0");
}

namespace {

void check_logits(const torch::Tensor& s, const char* who) {
  if (!s.defined() || s.dim() != 1 || s.numel() == 0)
    throw ConfigError(std::string(who) + ": logits must be a nonempty {N} tensor");
  if (!torch::isfinite(s).all().item<bool>())
    throw NumericError(std::string(who) + ": non-finite logits");
}

torch::Tensor finite_or_throw(torch::Tensor t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>())
    throw NumericError(std::string(what) + " is not finite");
  return t;
}

}  // namespace

torch::Tensor d_adv_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  check_logits(real_logits, "d_adv_loss");
  check_logits(fake_logits, "d_adv_loss");
  auto loss = torch::softplus(-real_logits).mean() + torch::softplus(fake_logits).mean();
  return finite_or_throw(loss, "d_adv_loss");
}

torch::Tensor g_adv_loss(const torch::Tensor& fake_logits, AdvVariant variant) {
  check_logits(fake_logits, "g_adv_loss");
  auto loss = variant == AdvVariant::kNonSaturating ? torch::softplus(-fake_logits).mean()
                                                    : -torch::softplus(fake_logits).mean();
  return finite_or_throw(loss, "g_adv_loss");
}

torch::Tensor recon_loss(const torch::Tensor& f_in, const torch::Tensor& f_cycle) {
  if (!f_in.defined() || !f_cycle.defined() || f_in.sizes() != f_cycle.sizes())
    throw ConfigError("recon_loss: feature maps must share a shape");
  return finite_or_throw((f_in - f_cycle).abs().mean(), "recon_loss");
}

torch::Tensor r1_penalty(const std::function<torch::Tensor(const torch::Tensor&)>& score_fn,
                         const torch::Tensor& real_images, double gamma) {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("r1_penalty: bad gamma");
  auto x = real_images.detach().clone().set_requires_grad(true);
  auto scores = score_fn(x);
  if (scores.dim() != 1 || scores.size(0) != x.size(0))
    throw ConfigError("r1_penalty: score_fn must map {N,...} to {N}");
  torch::Tensor grads;
  if (scores.requires_grad()) {
    grads = torch::autograd::grad({scores.sum()}, {x}, /*grad_outputs=*/{},
                                  /*retain_graph=*/c10::nullopt, /*create_graph=*/true,
                                  /*allow_unused=*/true)[0];
  }
  if (!grads.defined()) grads = torch::zeros_like(x);  // constant discriminator
  auto per_sample = grads.pow(2).flatten(1).sum(1);
  return finite_or_throw((gamma / 2.0) * per_sample.mean(), "r1_penalty");
}

torch::Tensor r1_penalty(const ModelParams& p, const torch::Tensor& real_images,
                         const torch::Tensor& c_one_hot, double gamma) {
  return r1_penalty(
      [&](const torch::Tensor& x) { return discriminate_batch(p, x, c_one_hot); }, real_images,
      gamma);
}

torch::Tensor eg_total(const torch::Tensor& adv, const torch::Tensor& recon,
                       const LossConfig& cfg) {
  cfg.validate();
  return finite_or_throw(adv + cfg.lambda_recon * recon, "eg_total");
}

}  // namespace shapegan
