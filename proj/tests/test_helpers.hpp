#pragma once

#include <cstdio>
#include <filesystem>
#include <random>
#include <string>

// Scratch directory per test binary run.
inline std::string test_dir() {
    static std::string dir = [] {
        std::string d = (std::filesystem::temp_directory_path() /
                         ("dwiseg_test_" + std::to_string(::getpid())))
                            .string();
        std::filesystem::create_directories(d);
        return d;
    }();
    return dir;
}

inline std::string test_path(const std::string& name) { return test_dir() + "/" + name; }
