#include "ahbd/attack.hpp"

#include <ostream>

#include "ahbd/training.hpp"
#include "json.hpp"

namespace ahbd {

void TrainConfig::validate() const {
  if (epochs < 0) throw ContractError("train config: epochs must be >= 0");
  if (!(lr >= 0.0)) throw ContractError("train config: lr must be >= 0");
  if (batch_size == 0) throw ContractError("train config: batch_size must be >= 1");
}

TrainResult train(ModelParams& params, const Corpus& corpus, const TrainConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw ContractError("train: empty corpus");
  const std::vector<double> lrs(params.size(), cfg.lr);
  TrainResult result;
  result.loss_trace = run_sgd(params, corpus, {cfg.epochs, cfg.batch_size, cfg.seed}, lrs);
  return result;
}

void write_loss_trace(const TrainResult& result, const TrainConfig& cfg, std::ostream& out) {
  nlohmann::ordered_json j;
  j["epochs"] = cfg.epochs;
  j["lr"] = cfg.lr;
  j["batch_size"] = cfg.batch_size;
  j["seed"] = cfg.seed;
  j["loss"] = result.loss_trace;
  out << j.dump(2) << '\n';
}

}  // namespace ahbd
