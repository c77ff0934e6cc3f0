#include "groundcap/cli.hpp"

int main(int argc, char** argv) { return groundcap::run_cli(argc, argv); }
