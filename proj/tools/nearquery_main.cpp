#include "nearquery/cli.hpp"

int main(int argc, char** argv) { return nq::cli_main(argc, argv); }
