#include "d2t/pipeline/cli.hpp"

int main(int argc, char** argv) { return d2t::pipeline::run_cli(argc, argv); }
