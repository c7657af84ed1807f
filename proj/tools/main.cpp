#include "vqat2i/cli/cli.hpp"

int main(int argc, char** argv) { return vqat2i::cli::run(argc, argv); }
