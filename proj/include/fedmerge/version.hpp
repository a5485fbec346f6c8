#pragma once

#define FEDMERGE_VERSION "0.1.0"
