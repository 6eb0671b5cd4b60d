#include "icsteer/pipeline.hpp"

int main(int argc, char** argv) { return icsteer::cli_main(argc, argv); }
