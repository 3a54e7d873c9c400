#include "chaosmetro/cli.hpp"

int main(int argc, char** argv) { return chaosmetro::cli::run(argc, argv); }
