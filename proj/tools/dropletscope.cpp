#include "dropletscope/pipeline.hpp"

int main(int argc, char** argv) { return dropletscope::pipeline::run_cli(argc, argv); }
