#include "cli.hpp"

int main(int argc, char** argv) { return crtm::cli::run(argc, argv); }
