#include "gals/cli.hpp"

int main(int argc, char** argv) { return gals::run_cli(argc, argv); }
