#include "dualpert/cli.hpp"

int main(int argc, char** argv) { return dualpert::cli_main(argc, argv); }
