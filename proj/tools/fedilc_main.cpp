#include "fedilc/cli.hpp"

int main(int argc, char** argv) { return fedilc::cli_main(argc, argv); }
