#include "pct/cli.hpp"

int main(int argc, char** argv) { return pct::cli::main(argc, argv); }
