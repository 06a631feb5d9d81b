#include "commands.h"

int main(int argc, char** argv) {
    CLI::App app{"Cross-modal recipe retrieval: structured text extraction, two-stage training and evaluation"};
    app.require_subcommand(1);
    cmr::tools::configure_ste_build(*app.add_subcommand("ste-build", "Structure a caption corpus"));
    cmr::tools::configure_synth(*app.add_subcommand("synth", "Write the synthetic corpora"));
    cmr::tools::configure_pretrain(*app.add_subcommand("pretrain", "Stage-1 pretraining"));
    cmr::tools::configure_finetune(*app.add_subcommand("finetune", "Stage-2 finetuning"));
    cmr::tools::configure_evaluate(*app.add_subcommand("evaluate", "Retrieval evaluation"));
    cmr::tools::configure_ablate(*app.add_subcommand("ablate", "Ablation matrix"));
    cmr::tools::configure_probe(*app.add_subcommand("probe", "Linear probe"));
    cmr::tools::configure_report(*app.add_subcommand("report", "Report table"));
    cmr::tools::configure_plot(*app.add_subcommand("plot", "Training curves"));
    return cmr::tools::run(app, argc, argv);
}
