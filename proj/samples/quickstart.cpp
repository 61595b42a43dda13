// Trains MRFF on a small synthetic population and prints the per-round metrics.
#include <cstdio>
#include <string>

#include "mrff/data.hpp"
#include "mrff/federated.hpp"

int main(int argc, char** argv) {
  mrff::SyntheticSpec spec;
  spec.seed = 11;
  const auto synth = mrff::synthetic_generate(spec);
  const auto split = mrff::leave_one_out_split(synth.log);

  mrff::ModelConfig cfg;
  cfg.attr_vocab = synth.log.attr_vocab();
  const auto data = mrff::build_sequences(synth.log, split, cfg.max_seq_len);

  mrff::FederationOptions opt;
  opt.rounds = argc > 1 ? std::stoul(argv[1]) : 20;
  opt.seed = 11;
  opt.eval_every = 5;
  if (argc > 2) opt.train.batch_size = std::stoul(argv[2]);
  if (argc > 3) opt.train.learning_rate = std::stod(argv[3]);
  if (argc > 4) opt.train.local_epochs = std::stoul(argv[4]);
  if (argc > 6) opt.train.alpha = std::stod(argv[6]);
  if (argc > 5 && std::string(argv[5]) == "adam") opt.train.optimizer = mrff::OptimizerKind::kAdam;

  mrff::Federation<float> fed(cfg, mrff::ItemCatalog::from_log(synth.log), data, opt);
  fed.run([](const mrff::RoundReport& r) {
    std::printf("round %3zu  test auc %.4f  logloss %.4f  balance %.4f  max share %.3f  %.3fs\n", r.round,
                r.test.auc, r.test.logloss, r.balance_loss, r.shares.max_share(), r.wall_seconds);
  });
  return 0;
}
