// SPDX-License-Identifier: Apache-2.0
#include "qsla/model.hpp"
#include "qsla/rng.hpp"

namespace qsla::model {

ad::GradCheckReport model_grad_check(Variant variant, std::uint64_t seed, double tolerance,
                                     std::size_t max_entries) {
  QslaConfig cfg;
  cfg.width_scale = 1.0 / 32.0;
  cfg.num_classes = 4;
  cfg.variant = variant;
  Model<double> model(cfg);
  model.init(seed);

  const std::array<signal::Modulation, 3> mods = {signal::Modulation::kBpsk, signal::Modulation::kQam16,
                                                  signal::Modulation::kGfsk};
  std::vector<signal::IQFrame> frames;
  std::vector<int> labels;
  for (std::size_t k = 0; k < mods.size(); ++k) {
    auto rng = CounterRng::derive(seed, {0x6c6f7373, k});
    frames.push_back(signal::synthesize_frame(mods[k], static_cast<int>(k), 10, rng));
    labels.push_back(static_cast<int>(k));
  }
  const auto batch = make_batch<double>(frames);
  const ad::DropoutKey key{seed, 1, 0};

  std::vector<ad::NamedTensor> params;
  for (auto& p : model.params()) params.push_back({p.name, p.tensor});
  ad::GradCheckOptions opts;
  opts.max_entries = max_entries;
  opts.seed = seed;
  return ad::grad_check(
      "model/" + std::string(variant_name(variant)),
      [&](ad::Tape<double>& tape) {
        const auto logits = model.forward(tape, batch, Mode::kTrain, key);
        return model.loss(tape, logits, labels).total;
      },
      params, tolerance, opts);
}

}  // namespace qsla::model
