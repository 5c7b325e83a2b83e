// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mola {

/// Raw little-endian float32 array, no header.
void write_f32(const std::filesystem::path& path, std::span<const float> values);
std::vector<float> read_f32(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// Splits one CSV line on commas. Fields never contain quotes or commas here.
std::vector<std::string> split_csv_line(const std::string& line);

}  // namespace mola
