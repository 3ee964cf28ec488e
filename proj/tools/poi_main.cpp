#include "poi/cli.hpp"

int main(int argc, char** argv) { return poi::cli::run(argc, argv); }
