#pragma once

#include <torch/torch.h>

#include <functional>
#include <string>

#include "shapegan/model.hpp"

namespace shapegan {

enum class AdvVariant { kNonSaturating, kMinimax };

std::string adv_variant_to_string(AdvVariant v);
AdvVariant adv_variant_from_string(const std::string& s);

struct LossConfig {
  double lambda_recon = 50.0;
  double gamma_r1 = 10.0;
  AdvVariant variant = AdvVariant::kNonSaturating;

  void validate() const;
};

// Scores are raw logits {N}. All losses come back as 0-dim tensors with the
// autograd graph intact; non-finite logits raise NumericError.
//
// D loss: -(E[log sigmoid(real)] + E[log(1 - sigmoid(fake))]), computed as
// E[softplus(-real)] + E[softplus(fake)].
torch::Tensor d_adv_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);

// G loss. Non-saturating: -E[log sigmoid(fake)] = E[softplus(-fake)].
// Minimax: E[log(1 - sigmoid(fake))] = -E[softplus(fake)].
torch::Tensor g_adv_loss(const torch::Tensor& fake_logits, AdvVariant variant);

// Mean absolute difference between the input features and the features of the
// regenerated image, averaged over every element and the batch.
torch::Tensor recon_loss(const torch::Tensor& f_in, const torch::Tensor& f_cycle);

// gamma/2 * E[ ||d logit / d x||^2 ] on real inputs, with create_graph so the
// penalty itself is differentiable w.r.t. discriminator parameters.
torch::Tensor r1_penalty(const std::function<torch::Tensor(const torch::Tensor&)>& score_fn,
                         const torch::Tensor& real_images, double gamma);
torch::Tensor r1_penalty(const ModelParams& p, const torch::Tensor& real_images,
                         const torch::Tensor& c_one_hot, double gamma);

// adv + lambda_recon * recon, the encoder/generator descent objective.
torch::Tensor eg_total(const torch::Tensor& adv, const torch::Tensor& recon,
                       const LossConfig& cfg);

}  // namespace shapegan
