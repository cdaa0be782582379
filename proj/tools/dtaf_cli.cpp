#include "dtaf/cli.hpp"

int main(int argc, char** argv) { return dtaf::cli::run(argc, argv); }
