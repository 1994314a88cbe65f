#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "ahbd/corpus.hpp"
#include "ahbd/transformer.hpp"

namespace ahbd {

struct TrainConfig {
  int epochs = 8;
  double lr = 0.3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainResult {
  std::vector<double> loss_trace;  // mean answer-position loss per epoch
};

// Minibatch SGD over the corpus with a single learning rate for every
// parameter. Used both for the clean reference model and, on a poisoned
// corpus, to implant the backdoor.
TrainResult train(ModelParams& params, const Corpus& corpus, const TrainConfig& cfg);

void write_loss_trace(const TrainResult& result, const TrainConfig& cfg, std::ostream& out);

}  // namespace ahbd
