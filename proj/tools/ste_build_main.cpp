#include "commands.h"

int main(int argc, char** argv) {
    CLI::App app;
    cmr::tools::configure_ste_build(app);
    return cmr::tools::run(app, argc, argv);
}
