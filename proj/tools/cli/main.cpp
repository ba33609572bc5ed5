#include <iostream>
#include <string>
#include <vector>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "commands.hpp"

int main(int argc, char** argv) {
    // Logs go to stderr so reports written to stdout stay machine-readable.
    spdlog::set_default_logger(spdlog::stderr_color_mt("ulr"));
    std::vector<std::string> args(argv + 1, argv + argc);
    return ulr::cli::run(args, std::cout, std::cerr);
}
