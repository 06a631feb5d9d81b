#pragma once

// Subcommands of the cmr command-line tool. Each configure_* function adds
// the options and the callback of one command to `cmd`, which may be a
// subcommand or a standalone application.

#include <CLI11.hpp>

namespace cmr::tools {

void configure_ste_build(CLI::App& cmd);
void configure_synth(CLI::App& cmd);
void configure_pretrain(CLI::App& cmd);
void configure_finetune(CLI::App& cmd);
void configure_evaluate(CLI::App& cmd);
void configure_ablate(CLI::App& cmd);
void configure_probe(CLI::App& cmd);
void configure_report(CLI::App& cmd);
void configure_plot(CLI::App& cmd);

/// Parses and runs `app`. Usage errors return CLI11's exit code; failures
/// inside a command print "error: ..." and return 1.
int run(CLI::App& app, int argc, char** argv);

}  // namespace cmr::tools
