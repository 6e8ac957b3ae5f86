// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#include "ckptmerge/errors.hpp"

namespace ckptmerge {

std::string_view error_kind_name(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Format: return "FormatError";
        case ErrorKind::UnsupportedDtype: return "UnsupportedDtype";
        case ErrorKind::Io: return "IoError";
        case ErrorKind::StructureMismatch: return "StructureMismatch";
        case ErrorKind::BaseMismatch: return "BaseMismatch";
        case ErrorKind::EmptyInput: return "EmptyInput";
        case ErrorKind::InvalidParameter: return "InvalidParameter";
        case ErrorKind::Numerical: return "NumericalError";
        case ErrorKind::IllConditioned: return "IllConditioned";
        case ErrorKind::DegenerateInput: return "DegenerateInput";
        case ErrorKind::UnknownMethod: return "UnknownMethod";
        case ErrorKind::MissingField: return "MissingField";
    }
    return "Error";
}

namespace {

template <ErrorKind K>
[[noreturn]] void raise(const std::string& what) {
    throw KindError<K>(what);
}

}  // namespace

void rethrow_with_context(const Error& e, const std::string& context) {
    const std::string what = context + ": " + e.what();
    switch (e.kind()) {
        case ErrorKind::Format: raise<ErrorKind::Format>(what);
        case ErrorKind::UnsupportedDtype: raise<ErrorKind::UnsupportedDtype>(what);
        case ErrorKind::Io: raise<ErrorKind::Io>(what);
        case ErrorKind::StructureMismatch: raise<ErrorKind::StructureMismatch>(what);
        case ErrorKind::BaseMismatch: raise<ErrorKind::BaseMismatch>(what);
        case ErrorKind::EmptyInput: raise<ErrorKind::EmptyInput>(what);
        case ErrorKind::InvalidParameter: raise<ErrorKind::InvalidParameter>(what);
        case ErrorKind::Numerical: raise<ErrorKind::Numerical>(what);
        case ErrorKind::IllConditioned: raise<ErrorKind::IllConditioned>(what);
        case ErrorKind::DegenerateInput: raise<ErrorKind::DegenerateInput>(what);
        case ErrorKind::UnknownMethod: raise<ErrorKind::UnknownMethod>(what);
        case ErrorKind::MissingField: raise<ErrorKind::MissingField>(what);
    }
    throw Error(e.kind(), what);
}

}  // namespace ckptmerge
