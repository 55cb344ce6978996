// Trains a decoder on the toy dataset for a few epochs and prints the
// evaluation table. Usage: toy_quickstart [epochs]

#include <agp/agp.hpp>

#include <cstdio>
#include <cstdlib>

int main(int argc, char** argv) {
    agp::ExperimentConfig cfg = agp::toy_experiment(7);
    if (argc > 1) cfg.model.train.epochs = std::atoi(argv[1]);
    cfg = agp::resolve(cfg);

    const agp::DatasetManifest data = agp::load_dataset(cfg);
    const agp::VitEncoder encoder = agp::make_encoder(cfg.model.encoder);
    const auto models = agp::train_experiment(cfg, data, encoder, {}, [](const std::string&, const agp::EpochSummary& e) {
        std::printf("epoch %3d  loss %.5f\n", e.epoch, e.l_total);
    });
    const auto scored = agp::score_experiment(cfg, data, encoder, models);
    std::fputs(agp::format_eval_table(agp::evaluate(scored)).c_str(), stdout);
}
